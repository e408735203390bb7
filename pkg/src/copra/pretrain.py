"""Supervised bootstrap of the backbone on the synthetic corpus.

This stands in for a pretrained VLM: a short teacher-forced run teaches the
toy model the response format and a rough notion of "anomalous", after which
its parameters are frozen for every later stage.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone
from .grpo import format_reward
from .numeric import ContractViolation, numpy_rng
from .pipeline import frames_to_tensor
from .synthdata import read_blob, read_manifest

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 20
    weight_decay: float = 0.0
    grad_clip_norm: float = 1.0
    holdout_fraction: float = 0.1
    eval_every: int = 100


@dataclass
class PretrainResult:
    corpus_hash: str
    seed: int
    steps: int
    losses: list[float] = field(default_factory=list)
    heldout: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heldout"] = {str(k): v for k, v in self.heldout.items()}
        return d


def corpus_hash(corpus: list[dict]) -> str:
    h = hashlib.sha256()
    for item in corpus:
        h.update(json.dumps(item, sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


def split_corpus(corpus: list[dict], holdout_fraction: float) -> tuple[list[dict], list[dict]]:
    """Hold out whole videos, chosen by id hash."""
    ids = sorted({c["id"] for c in corpus}, key=lambda i: hashlib.sha256(i.encode()).hexdigest())
    held = set(ids[:int(round(holdout_fraction * len(ids)))])
    return [c for c in corpus if c["id"] not in held], [c for c in corpus if c["id"] in held]


class CorpusTensors:
    """Conditioning frames and padded gold responses for a list of items."""

    def __init__(self, backbone: Backbone, corpus: list[dict], root: str | Path):
        root = Path(root)
        blobs = {r["id"]: root / r["blob"] for r in read_manifest(root)}
        cache: dict[str, np.ndarray] = {}
        frames, responses = [], []
        tk = backbone.tokenizer
        for c in corpus:
            if c["id"] not in cache:
                cache[c["id"]] = read_blob(blobs[c["id"]], c["id"])
            frames.append(frames_to_tensor(cache[c["id"]], c["indices"]))
            responses.append(tk.encode(c["response"]) + [tk.id("<eos>")])
        width = max(len(r) for r in responses)
        pad = tk.id("<pad>")
        self.frames = torch.stack(frames)
        self.ids = torch.tensor([r + [pad] * (width - len(r)) for r in responses])
        self.lengths = torch.tensor([len(r) for r in responses])
        self.items = corpus

    def __len__(self) -> int:
        return len(self.items)

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(idx)
        n = int(self.lengths[idx].max())
        return self.frames[idx], self.ids[idx, :n], self.lengths[idx]


def sft_loss(backbone: Backbone, frames: torch.Tensor, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    vis = backbone.encode_frames(frames, grad=torch.is_grad_enabled())
    logits = backbone.teacher_forced_logits(backbone.prompt, vis, ids)
    mask = torch.arange(ids.shape[1])[None, :] < lengths[:, None]
    return F.cross_entropy(logits[mask], ids[mask])


@torch.no_grad()
def heldout_loss(backbone: Backbone, data: CorpusTensors, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(data), batch_size):
        idx = list(range(lo, min(len(data), lo + batch_size)))
        f, ids, lengths = data.batch(idx)
        n_tok = int(lengths.sum())
        total += float(sft_loss(backbone, f, ids, lengths)) * n_tok
        count += n_tok
    return total / max(count, 1)


def pretrain_backbone(backbone: Backbone, corpus: list[dict], root: str | Path, cfg: PretrainConfig,
                      seed: int = 0, log_file: str | Path | None = None) -> PretrainResult:
    """Teacher-forced cross-entropy on gold responses; leaves the backbone
    frozen. With ``cfg.steps == 0`` the parameters are untouched."""
    if not corpus:
        raise ContractViolation("supervised corpus is empty")
    result = PretrainResult(corpus_hash(corpus), seed, cfg.steps)
    train_items, held_items = split_corpus(corpus, cfg.holdout_fraction)
    if not train_items:
        raise ContractViolation("no training items left after the held-out split")
    train_data = CorpusTensors(backbone, train_items, root)
    held_data = CorpusTensors(backbone, held_items, root) if held_items else None
    if cfg.steps == 0:
        backbone.freeze()
        return result

    for p in backbone.parameters():
        p.requires_grad_(True)
    backbone.train()
    params = list(backbone.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / max(1, cfg.warmup)) * max(0.0, 1.0 - s / cfg.steps))
    rng = numpy_rng(seed, "pretrain-batches")
    sink = open(log_file, "a") if log_file is not None else None
    try:
        if held_data is not None:
            result.heldout[0] = heldout_loss(backbone, held_data)
        for step in range(1, cfg.steps + 1):
            idx = rng.choice(len(train_data), size=min(cfg.batch_size, len(train_data)), replace=False)
            loss = sft_loss(backbone, *train_data.batch(np.sort(idx)))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
            opt.step()
            sched.step()
            result.losses.append(loss.item())
            entry = dict(step=step, loss=result.losses[-1], lr=sched.get_last_lr()[0])
            if held_data is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
                result.heldout[step] = entry["heldout_loss"] = heldout_loss(backbone, held_data)
            if sink is not None:
                sink.write(json.dumps(entry) + "\n")
    finally:
        if sink is not None:
            sink.close()
        backbone.freeze()
    return result


@torch.no_grad()
def format_validity(backbone: Backbone, corpus: list[dict], root: str | Path, max_len: int = 32) -> float:
    """Fraction of items whose greedy response is format-valid."""
    data = CorpusTensors(backbone, corpus, root)
    vis = backbone.encode_frames(data.frames)
    ok = 0
    for i in range(len(data)):
        ids, _, lengths = backbone.sample(backbone.prompt, vis[i], None, 1, 0.0, max_len)
        ok += format_reward(backbone.tokenizer.decode(ids[0, :int(lengths[0])]))
    return ok / max(1, len(data))
