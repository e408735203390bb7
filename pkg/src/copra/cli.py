"""Command line: ``copra {synth,pretrain,train,infer,eval,diag}``.

All artifacts of a run live under ``--out``::

    config.yaml                 resolved configuration (rewritten by each command)
    run_manifest.json           one entry per command, marked incomplete until it finishes
    data/                       benchmark + pretraining corpus (synth)
    backbone.ckpt               frozen backbone (pretrain)
    policy.ckpt                 trainable adaptation parameters (train)
    scores/<granularity>/       per-video score tracks and timing (infer)
    report/<granularity>/       evaluation report, text + JSON (eval)
    diag/                       embeddings, 2-D projection, silhouette (diag)

Exit codes: 0 success, 1 usage error, 2 contract violation (including config
digest mismatches), 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, runner
from .config import RunConfig
from .evalkit import EvalReport
from .numeric import ContractViolation, NonFiniteLossError
from .pipeline import GRANULARITIES
from .policy import MODES

log = logging.getLogger("copra")

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run directory helpers
# ---------------------------------------------------------------------------


class Run:
    def __init__(self, out: str | Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)

    data = property(lambda self: self.out / "data")
    backbone = property(lambda self: self.out / "backbone.ckpt")
    policy = property(lambda self: self.out / "policy.ckpt")
    manifest = property(lambda self: self.out / "run_manifest.json")
    config = property(lambda self: self.out / "config.yaml")

    def scores(self, g: str) -> Path:
        return self.out / "scores" / g

    def report(self, g: str) -> Path:
        return self.out / "report" / g

    def read_manifest(self) -> dict:
        if self.manifest.exists():
            return json.loads(self.manifest.read_text())
        return {"code_version": __version__, "commands": []}

    def begin(self, command: str, cfg: RunConfig) -> int:
        m = self.read_manifest()
        m["commands"].append(dict(command=command, status="incomplete", config_digest=cfg.digest(),
                                  seed=cfg.seed, code_version=__version__, started=time.time(), outputs=[]))
        self.manifest.write_text(json.dumps(m, indent=2))
        return len(m["commands"]) - 1

    def finish(self, idx: int, outputs: list[str], extra: dict | None = None) -> None:
        m = self.read_manifest()
        entry = m["commands"][idx]
        entry.update(status="complete", finished=time.time(), outputs=outputs, **(extra or {}))
        self.manifest.write_text(json.dumps(m, indent=2))


def resolve_config(args, run: Run) -> RunConfig:
    path = args.config or (run.config if run.config.exists() else None)
    cfg = RunConfig.load(path)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None):
        changes["adaptation_mode"] = args.mode
    return cfg.replace(**changes) if changes else cfg


def header_lines(cfg: RunConfig, stage: str, **extra) -> list[str]:
    fields = dict(runner.stamp(cfg, stage), **extra)
    return [f"# {k}: {fields[k]}" for k in sorted(fields)]


def _require(path: Path, what: str, hint: str) -> None:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}; run `copra {hint}` first")


def _check_data(cfg: RunConfig, run: Run) -> None:
    _require(run.data / "manifest.jsonl", "dataset", "synth")
    info = json.loads((run.data / "dataset_info.json").read_text())
    if info.get("stage_digest") != cfg.stage_digest("synth"):
        raise ContractViolation(
            "dataset under --out was generated with a different dataset config or seed "
            "(synth digest mismatch); regenerate it or use the matching config")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig, run: Run) -> list[str]:
    info = runner.run_synth(cfg, run.data)
    info.update(runner.stamp(cfg, "synth"))
    (run.data / "dataset_info.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    print(f"wrote {cfg.dataset.n_videos} videos to {run.data} (digest {info['digest'][:12]}, "
          f"probe AUC {info['probe_auc']})")
    return [str(run.data)]


def cmd_pretrain(args, cfg: RunConfig, run: Run) -> list[str]:
    _check_data(cfg, run)
    log_file = run.out / "pretrain_log.jsonl"
    _write_log_header(log_file, cfg, "pretrain")
    backbone, result = runner.run_pretrain(cfg, run.data, log_file)
    runner.save_backbone(run.backbone, cfg, backbone, result)
    print(f"pretrained {result.steps} steps; held-out loss {result.heldout}")
    return [str(run.backbone), str(log_file)]


def cmd_train(args, cfg: RunConfig, run: Run) -> list[str]:
    _check_data(cfg, run)
    _require(run.backbone, "backbone checkpoint", "pretrain")
    backbone, _ = runner.load_backbone(run.backbone, cfg)
    log_file = run.out / "train_log.jsonl"
    _write_log_header(log_file, cfg, "train")
    policy, logs = runner.run_train(cfg, backbone, run.data, log_file)
    runner.save_policy(run.policy, cfg, policy, logs)
    if logs:
        print(f"{cfg.adaptation_mode}: {len(logs)} optimizer steps, final reward mean {logs[-1]['reward_mean']:.3f}")
    else:
        print(f"{cfg.adaptation_mode}: no trainable parameters, zero optimizer steps")
    return [str(run.policy), str(log_file)]


def cmd_infer(args, cfg: RunConfig, run: Run) -> list[str]:
    _check_data(cfg, run)
    _require(run.policy, "policy checkpoint", "train")
    backbone, _ = runner.load_backbone(run.backbone, cfg)
    policy, _ = runner.load_policy(run.policy, cfg, backbone)
    grans = list(GRANULARITIES) if args.sweep else [args.granularity or cfg.pipeline.granularity]
    outputs = []
    for g in grans:
        res = runner.run_infer(cfg, backbone, policy, run.data, g)
        d = run.scores(g)
        d.mkdir(parents=True, exist_ok=True)
        head = header_lines(cfg, "infer", granularity=g)
        for vid, vs in res.videos.items():
            lines = head + [f"# unreached_segments: {vs.unreached}", "frame\ts1\ts2\ts3"]
            lines += [f"{int(r[0])}\t{float(r[1])!r}\t{float(r[2])!r}\t{float(r[3])!r}" for r in vs.track.as_columns()]
            (d / f"{vid}.tsv").write_text("\n".join(lines) + "\n")
        timing = dict(runner.stamp(cfg, "infer"), granularity=g, **res.timing)
        (d / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True))
        print(f"{g}: scored {len(res.videos)} videos; parameter generation {res.timing['parameter_generation']:.2f}s, "
              f"adapted generation {res.timing['adapted_generation']:.2f}s, "
              f"baseline generation {res.timing.get('baseline_generation', 0.0):.2f}s")
        outputs.append(str(d))
    return outputs


def read_scores(path: Path, cfg: RunConfig) -> tuple[dict[str, float | str], np.ndarray]:
    meta, rows = {}, []
    for line in path.read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            meta[k] = v
        elif line and not line.startswith("frame"):
            rows.append([float(x) for x in line.split("\t")])
    if meta.get("stage_digest") != cfg.stage_digest("infer"):
        raise ContractViolation(f"{path} was produced under a different configuration (infer digest mismatch)")
    return meta, np.asarray(rows).reshape(-1, 4)


def cmd_eval(args, cfg: RunConfig, run: Run) -> list[str]:
    _check_data(cfg, run)
    root = run.out / "scores"
    if args.granularity:
        grans = [args.granularity]
    else:
        grans = [g for g in GRANULARITIES if (root / g).is_dir()]
    if not grans:
        raise FileNotFoundError(f"no score sets under {root}; run `copra infer` first")
    labels = runner.frame_labels_of(cfg, run.data)
    outputs = []
    for g in grans:
        d = run.scores(g)
        _require(d, f"score set {g}", f"infer --granularity {g}")
        tracks = {}
        for f in sorted(d.glob("*.tsv")):
            _, arr = read_scores(f, cfg)
            tracks[f.stem] = {"s1": arr[:, 1], "s2": arr[:, 2], "s3": arr[:, 3]}
        meta = dict(runner.stamp(cfg, "infer"), granularity=g, mode=cfg.adaptation_mode)
        rep = runner.evaluate(tracks, labels, meta)
        out = run.report(g)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(rep.to_text())
        (out / "report.json").write_text(rep.to_json())
        sys.stdout.write(f"[{g}]\n" + rep.to_text())
        outputs += [str(out / "report.txt"), str(out / "report.json")]
    return outputs


def cmd_diag(args, cfg: RunConfig, run: Run) -> list[str]:
    _check_data(cfg, run)
    _require(run.policy, "policy checkpoint", "train")
    backbone, _ = runner.load_backbone(run.backbone, cfg)
    policy, _ = runner.load_policy(run.policy, cfg, backbone)
    d = run.out / "diag"
    d.mkdir(parents=True, exist_ok=True)
    head = header_lines(cfg, "train") + ["# projection: principal components (linear), used in place of t-SNE"]
    summary = dict(runner.stamp(cfg, "train"), projection="pca-2d (replaces t-SNE)")
    outputs = []
    for name, pol in (("frozen", runner.build_policy(cfg, backbone, "frozen")), (cfg.adaptation_mode, policy)):
        ids, ys, emb = runner.video_embeddings(cfg, backbone, pol, run.data)
        pts, sil = runner.embedding_diagnostics(emb, ys)
        lines = head + ["video\ty\t" + "\t".join(f"e{i}" for i in range(emb.shape[1]))]
        lines += [f"{v}\t{y}\t" + "\t".join(repr(float(x)) for x in e) for v, y, e in zip(ids, ys, emb)]
        (d / f"embeddings_{name}.tsv").write_text("\n".join(lines) + "\n")
        lines = head + ["video\ty\tx0\tx1"]
        lines += [f"{v}\t{y}\t{float(p[0])!r}\t{float(p[1])!r}" for v, y, p in zip(ids, ys, pts)]
        (d / f"projection_{name}.tsv").write_text("\n".join(lines) + "\n")
        summary[f"silhouette_{name}"] = None if np.isnan(sil) else sil
        outputs += [str(d / f"embeddings_{name}.tsv"), str(d / f"projection_{name}.tsv")]
        print(f"silhouette ({name}): {sil:.4f}")
    (d / "silhouette.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return outputs + [str(d / "silhouette.json")]


def _write_log_header(path: Path, cfg: RunConfig, stage: str) -> None:
    path.write_text(json.dumps({"header": runner.stamp(cfg, stage)}) + "\n")


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
    "infer": cmd_infer, "eval": cmd_eval, "diag": cmd_diag,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="copra", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--config", help="YAML or JSON config (default: <out>/config.yaml if present)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            sp.add_argument("--mode", choices=MODES, help="override adaptation_mode")
        if name in ("infer", "eval"):
            sp.add_argument("--granularity", choices=list(GRANULARITIES))
        if name == "infer":
            sp.add_argument("--sweep", action="store_true", help="score every granularity")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
    except UsageError as e:
        print(f"copra: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        run = Run(args.out)
        cfg = resolve_config(args, run)
        idx = run.begin(args.command, cfg)
        outputs = COMMANDS[args.command](args, cfg, run)
        cfg.dump(run.config)
        run.finish(idx, outputs)
    except (ContractViolation, NonFiniteLossError) as e:
        print(f"copra: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as e:
        print(f"copra: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
