"""Stage functions shared by the command line and the experiment scripts.

Every stage takes a resolved :class:`RunConfig`; seeds for each component are
derived from ``cfg.seed`` so that changing one component never perturbs
another's random stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import __version__
from .backbone import Backbone
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .evalkit import EvalReport, project_2d, silhouette_2d
from .grpo import conditioning_frames, train
from .numeric import ContractViolation, derive_seed
from .pipeline import SamplingConfig, VideoScores, score_video
from .policy import make_policy
from .pretrain import PretrainResult, pretrain_backbone
from .synthdata import generate_dataset, load_sft_corpus, load_split, pretrain_root


def stamp(cfg: RunConfig, stage: str) -> dict:
    """Provenance fields embedded in every artifact."""
    return dict(config_digest=cfg.digest(), stage=stage, stage_digest=cfg.stage_digest(stage),
                code_version=__version__, seed=cfg.seed)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def build_backbone(cfg: RunConfig) -> Backbone:
    return Backbone(cfg.backbone, seed=derive_seed(cfg.seed, "backbone"))


def build_policy(cfg: RunConfig, backbone: Backbone, mode: str | None = None) -> nn.Module:
    return make_policy(mode or cfg.adaptation_mode, backbone, cfg.generator, seed=derive_seed(cfg.seed, "adapter"))


def trainable_tensors(policy: nn.Module) -> dict[str, torch.Tensor]:
    """What a policy checkpoint stores: nothing for frozen, the shared A/B
    pair for static LoRA, the generator (phi2 and p_global) for COPRA."""
    return {k: v.detach() for k, v in policy.state_dict().items()}


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_synth(cfg: RunConfig, data_dir: str | Path) -> dict:
    return generate_dataset(cfg.dataset, data_dir)


def run_pretrain(cfg: RunConfig, data_dir: str | Path, log_file: str | Path | None = None
                 ) -> tuple[Backbone, PretrainResult]:
    backbone = build_backbone(cfg)
    corpus = load_sft_corpus(data_dir)
    result = pretrain_backbone(backbone, corpus, pretrain_root(data_dir), cfg.pretrain,
                               seed=derive_seed(cfg.seed, "pretrain"), log_file=log_file)
    return backbone, result


def save_backbone(path: str | Path, cfg: RunConfig, backbone: Backbone, result: PretrainResult) -> Path:
    meta = dict(stamp(cfg, "pretrain"), corpus_hash=result.corpus_hash, pretrain_seed=result.seed,
                steps=result.steps, heldout={str(k): v for k, v in result.heldout.items()})
    return save_checkpoint(path, "backbone", backbone.theta(), cfg.stage_digest("pretrain"), cfg.seed, meta)


def load_backbone(path: str | Path, cfg: RunConfig) -> tuple[Backbone, Checkpoint]:
    ck = load_checkpoint(path, "backbone", cfg.stage_digest("pretrain"))
    backbone = build_backbone(cfg)
    backbone.load_state_dict(ck.tensors)
    return backbone.freeze(), ck


def run_train(cfg: RunConfig, backbone: Backbone, data_dir: str | Path,
              log_file: str | Path | None = None) -> tuple[nn.Module, list[dict]]:
    policy = build_policy(cfg, backbone)
    records = load_split(data_dir, "train", cfg.dataset.train_fraction)
    logs = train(records, backbone, policy, cfg.grpo, seed=derive_seed(cfg.seed, "grpo"), log_file=log_file)
    policy.eval()
    return policy, logs


def save_policy(path: str | Path, cfg: RunConfig, policy: nn.Module, logs: list[dict]) -> Path:
    meta = dict(stamp(cfg, "train"), mode=policy.mode, optimizer_steps=len(logs))
    return save_checkpoint(path, "policy", trainable_tensors(policy), cfg.stage_digest("train"), cfg.seed, meta)


def load_policy(path: str | Path, cfg: RunConfig, backbone: Backbone) -> tuple[nn.Module, Checkpoint]:
    ck = load_checkpoint(path, "policy", cfg.stage_digest("train"))
    policy = build_policy(cfg, backbone, ck.meta.get("mode"))
    policy.load_state_dict(ck.tensors)
    policy.eval()
    for p in policy.parameters():
        p.requires_grad_(False)
    return policy, ck


@dataclass
class InferResult:
    granularity: str
    videos: dict[str, VideoScores]
    timing: dict = field(default_factory=dict)


@torch.no_grad()
def run_infer(cfg: RunConfig, backbone: Backbone, policy: nn.Module, data_dir: str | Path,
              granularity: str | None = None, limit: int | None = None) -> InferResult:
    g = granularity or cfg.pipeline.granularity
    scfg = SamplingConfig(**{**cfg.to_dict()["pipeline"], "granularity": g})
    records = load_split(data_dir, "test", cfg.dataset.train_fraction)[:limit]
    out: dict[str, VideoScores] = {}
    timing = {"parameter_generation": 0.0, "adapted_generation": 0.0, "videos": len(records)}
    for rec in records:
        vs = score_video(backbone, policy, rec.frames(), rec.fps, scfg, delta_cache={})
        out[rec.id] = vs
        timing["parameter_generation"] += vs.timing["parameter_generation"]
        timing["adapted_generation"] += vs.timing["response_generation"]
    if records:
        # unadapted reference cost on the same videos
        t0 = time.perf_counter()
        frozen = make_policy("frozen", backbone)
        for rec in records:
            score_video(backbone, frozen, rec.frames(), rec.fps, scfg)
        timing["baseline_generation"] = time.perf_counter() - t0
    return InferResult(g, out, timing)


def frame_labels_of(cfg: RunConfig, data_dir: str | Path) -> dict[str, np.ndarray]:
    return {r.id: r.frame_labels for r in load_split(data_dir, "test", cfg.dataset.train_fraction)}


def evaluate(tracks: dict[str, dict[str, np.ndarray]], labels: dict[str, np.ndarray], meta: dict) -> EvalReport:
    missing = set(tracks) ^ set(labels)
    if missing:
        raise ContractViolation(f"score set and test split disagree on videos {sorted(missing)[:5]}")
    return EvalReport.from_tracks(tracks, labels, meta)


def tracks_of(result: InferResult) -> dict[str, dict[str, np.ndarray]]:
    return {v: {"s1": vs.track.s1, "s2": vs.track.s2, "s3": vs.track.s3} for v, vs in result.videos.items()}


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


@torch.no_grad()
def video_embeddings(cfg: RunConfig, backbone: Backbone, policy: nn.Module, data_dir: str | Path
                     ) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Sequence-level embedding of each test video under ``policy``."""
    records = load_split(data_dir, "test", cfg.dataset.train_fraction)
    ids, ys, embs = [], [], []
    for rec in records:
        vis = backbone.encode_frames(conditioning_frames(rec, backbone.cfg.n_frames))
        delta = policy.delta_for(vis)
        embs.append(backbone.extract_embedding(backbone.prompt, vis, delta).double().numpy())
        ids.append(rec.id)
        ys.append(rec.y)
    return ids, np.asarray(ys), np.stack(embs)


def embedding_diagnostics(embeddings: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    if len(embeddings) < 3:
        raise ContractViolation(f"diagnostics need at least 3 test videos, got {len(embeddings)}")
    pts = project_2d(embeddings)
    return pts, silhouette_2d(pts, labels)
