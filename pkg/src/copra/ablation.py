"""Scaled-down three-mode comparison (frozen / static LoRA / COPRA).

Every mode shares one synthetic benchmark, one pretrained backbone and one
GRPO configuration, so the only difference between runs is which parameters
are trainable. :func:`run_seed` executes the whole chain for one seed and
returns the Stage-3 AUCs; artifacts are cached under ``workdir`` so repeated
calls only redo the missing parts.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import runner
from .config import RunConfig
from .evalkit import roc_auc

# 250 videos -> 200 train / 50 test. Backbone and generator are shrunk so one
# seed runs in a few minutes on one CPU core; the GRPO learning rate is raised
# from 1e-6 because the toy model sees 200 updates instead of a full corpus.
BASE = dict(
    dataset=dict(n_videos=250, pretrain_videos=150),
    backbone=dict(n_layers=4, d_model=64, n_heads=4, prompt="compact", max_response_tokens=32),
    pretrain=dict(steps=300, batch_size=16),
    generator=dict(internal_dim=128, n_heads=4),
    grpo=dict(G=8, lr=3e-4, max_new_tokens=24),
)
MODES = ("frozen", "static_lora", "copra")


def config(seed: int, mode: str = "copra", **changes) -> RunConfig:
    doc = json.loads(json.dumps(BASE))
    doc.update(seed=seed, adaptation_mode=mode)
    return RunConfig.from_dict(doc).replace(**changes) if changes else RunConfig.from_dict(doc)


def prepare(seed: int, workdir: str | Path) -> tuple[RunConfig, Path]:
    """Benchmark + pretrained backbone for ``seed`` (cached)."""
    cfg = config(seed)
    d = Path(workdir) / f"seed{seed}"
    if not (d / "backbone.ckpt").exists():
        runner.run_synth(cfg, d / "data")
        bb, res = runner.run_pretrain(cfg, d / "data")
        runner.save_backbone(d / "backbone.ckpt", cfg, bb, res)
    return cfg, d


def run_mode(seed: int, workdir: str | Path, mode: str, **changes) -> dict:
    """Train (unless frozen), score the test split and evaluate one mode."""
    base, d = prepare(seed, workdir)
    cfg = config(seed, mode, **changes)
    t0 = time.perf_counter()
    backbone, _ = runner.load_backbone(d / "backbone.ckpt", cfg)
    policy, logs = runner.run_train(cfg, backbone, d / "data")
    res = runner.run_infer(cfg, backbone, policy, d / "data")
    labels = runner.frame_labels_of(cfg, d / "data")
    report = runner.evaluate(runner.tracks_of(res), labels, runner.stamp(cfg, "infer"))
    acc = [e["accuracy_mean"] for e in logs]
    return dict(seed=seed, mode=mode, changes=changes, auc=report.auc, ap=report.ap, report=report,
                steps=len(logs), accuracy=acc, per_type=_per_type(res, d / "data", cfg),
                seconds=time.perf_counter() - t0)


def run_seed(seed: int, workdir: str | Path) -> dict[str, dict]:
    return {m: run_mode(seed, workdir, m) for m in MODES}


def ordering_holds(result: dict[str, dict], margin: float = 0.03) -> bool:
    a = {m: result[m]["auc"]["s3"] for m in MODES}
    return a["copra"] > a["static_lora"] > a["frozen"] and a["copra"] - a["frozen"] >= margin


def accuracy_rises(acc: list[float], window: int = 50) -> bool:
    """Moving-average accuracy reward at the end exceeds the one at step 0."""
    if len(acc) < 2 * window:
        return False
    return float(np.mean(acc[-window:])) > float(np.mean(acc[:window]))


def _per_type(res, data_dir, cfg) -> dict[str, float]:
    from .synthdata import load_split

    recs = {r.id: r for r in load_split(data_dir, "test", cfg.dataset.train_fraction)}
    out = {}
    for t in sorted({r.anomaly_type for r in recs.values()} - {"none"}):
        ids = [v for v in recs if recs[v].anomaly_type in (t, "none")]
        s = np.concatenate([res.videos[v].track.s3 for v in ids])
        y = np.concatenate([recs[v].frame_labels for v in ids])
        out[t] = roc_auc(s, y)
    return out
