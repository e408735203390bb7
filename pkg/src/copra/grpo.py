"""Group-relative policy optimisation under weak video-level labels.

For each training video a single adapted policy is formed (static delta or a
delta generated from the video's conditioning frames), G responses are sampled
from it, scored with binary format and accuracy rewards, and the group-
normalised advantages drive a clipped surrogate plus an exact KL penalty
towards the frozen backbone. Only the adaptation parameters are optimised.
"""

from __future__ import annotations

import json
import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone
from .numeric import ContractViolation, NonFiniteLossError, op_trace, numpy_rng, tensor_digest, torch_generator
from .pipeline import frames_to_tensor, span_indices

log = logging.getLogger(__name__)

ADV_EPS = 1e-4

_BODY = r"((?:(?!</?(?:think|answer)>).)+)"
FORMAT_RE = re.compile(rf"<think>{_BODY}</think>\s*<answer>{_BODY}</answer>", re.S)
ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.S)
INT_RE = re.compile(r"-?\d+")


@dataclass
class GrpoConfig:
    G: int = 8
    epsilon_clip: float = 0.2
    beta_kl: float = 0.1
    lr: float = 1e-6
    lr_schedule: str = "linear"
    grad_clip_norm: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_accumulation: int = 1
    temperature: float = 1.0
    epochs: int = 1
    max_new_tokens: int | None = None   # None: the backbone's response limit
    checkpoint_every: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.G < 2:
            raise ContractViolation("group size G must be >= 2")
        if self.temperature <= 0:
            raise ContractViolation("training temperature must be > 0")
        if self.lr_schedule not in ("linear", "constant"):
            raise ContractViolation("lr_schedule must be 'linear' or 'constant'")
        if self.grad_accumulation < 1:
            raise ContractViolation("grad_accumulation must be >= 1")


# ---------------------------------------------------------------------------
# Rewards and advantages
# ---------------------------------------------------------------------------


def format_reward(text: str) -> int:
    return int(FORMAT_RE.fullmatch(text) is not None)


def accuracy_reward(text: str, y: int) -> int:
    if y not in (0, 1):
        raise ContractViolation("label must be 0 or 1")
    m = ANSWER_RE.search(text)
    if m is None:
        return 0
    k = INT_RE.search(m.group(1))
    return int(k is not None and int(k.group()) == y)


def group_advantages(rewards) -> torch.Tensor:
    """``(R - mean) / (popstd + 1e-4)`` within one group."""
    r = torch.as_tensor(rewards, dtype=torch.float64).reshape(-1)
    if r.numel() < 2:
        raise ContractViolation("group advantages need G >= 2")
    return (r - r.mean()) / (r.std(unbiased=False) + ADV_EPS)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _masked_rollout_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(x.dtype)
    return (x * m).sum(1) / m.sum(1).clamp_min(1.0)


def surrogate_loss(logp_new: torch.Tensor, logp_old: torch.Tensor, advantages: torch.Tensor,
                   mask: torch.Tensor | None = None, epsilon: float = 0.2) -> torch.Tensor:
    """Clipped surrogate over a group; all inputs are ``(G, O)`` except the
    per-rollout ``advantages`` ``(G,)``."""
    if mask is None:
        mask = torch.ones_like(logp_new, dtype=torch.bool)
    ratio = torch.exp(logp_new - logp_old)
    adv = advantages.to(logp_new.dtype)[:, None]
    per_token = torch.minimum(ratio * adv, torch.clamp(ratio, 1 - epsilon, 1 + epsilon) * adv)
    return -_masked_rollout_mean(per_token, mask).mean()


def categorical_kl(logits_p: torch.Tensor, logits_q: torch.Tensor) -> torch.Tensor:
    """Exact KL(p || q) along the last axis."""
    lp = torch.log_softmax(logits_p, -1)
    lq = torch.log_softmax(logits_q, -1)
    return (lp.exp() * (lp - lq)).sum(-1)


def kl_reference(logits_new: torch.Tensor, logits_ref: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Exact vocabulary KL at every generated position, averaged over the
    positions of each rollout and then over rollouts."""
    kl = categorical_kl(logits_new, logits_ref)
    if mask is None:
        mask = torch.ones_like(kl, dtype=torch.bool)
    return _masked_rollout_mean(kl, mask).mean()


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


@dataclass
class Group:
    ids: torch.Tensor           # (G, O) padded
    lengths: torch.Tensor       # (G,)
    texts: list[str]
    format: np.ndarray
    accuracy: np.ndarray
    advantages: torch.Tensor

    @property
    def rewards(self) -> np.ndarray:
        return self.format + self.accuracy

    @property
    def mask(self) -> torch.Tensor:
        return torch.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]


def sample_group(backbone: Backbone, vis: torch.Tensor, delta, y: int, G: int, temperature: float,
                 generator: torch.Generator, max_len: int | None = None) -> Group:
    with torch.no_grad():
        ids, _, lengths = backbone.sample(backbone.prompt, vis, None if delta is None else delta.detach(),
                                          G, temperature, max_len, generator)
    tk = backbone.tokenizer
    texts = [tk.decode(ids[g, :int(lengths[g])]) for g in range(G)]
    fmt = np.array([format_reward(t) for t in texts])
    acc = np.array([accuracy_reward(t, y) for t in texts])
    return Group(ids, lengths, texts, fmt, acc, group_advantages(fmt + acc))


def token_logps(logits: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits, -1).gather(-1, ids[..., None]).squeeze(-1)


def group_loss(backbone: Backbone, vis: torch.Tensor, delta, group: Group, cfg: GrpoConfig) -> dict:
    """Surrogate + beta * KL for one group, evaluated under ``delta`` (with
    grad) and the frozen reference."""
    logits = backbone.response_logits(backbone.prompt, vis, delta, group.ids)
    with torch.no_grad():
        ref = backbone.response_logits(backbone.prompt, vis, None, group.ids)
    new = token_logps(logits, group.ids)
    old = new.detach()  # single inner iteration: the sampling snapshot is the current policy
    mask = group.mask
    surr = surrogate_loss(new, old, group.advantages, mask, cfg.epsilon_clip)
    kl = kl_reference(logits, ref, mask)
    return {"loss": surr + cfg.beta_kl * kl, "surrogate": surr, "kl": kl}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def make_optimizer(params: Sequence[nn.Parameter], cfg: GrpoConfig, total_steps: int):
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps,
                            weight_decay=cfg.weight_decay)
    if cfg.lr_schedule == "linear":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: max(0.0, 1.0 - s / max(1, total_steps)))
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0)
    return opt, sched


def conditioning_frames(record, k: int) -> torch.Tensor:
    frames = record.frames()
    return frames_to_tensor(frames, span_indices(0, frames.shape[0], k))


@dataclass
class TrainState:
    step: int = 0
    logs: list[dict] = field(default_factory=list)


def train_epoch(records, backbone: Backbone, policy: nn.Module, cfg: GrpoConfig, *, seed: int = 0,
                epoch: int = 0, optimizer=None, scheduler=None, state: TrainState | None = None,
                log_file: str | Path | None = None,
                checkpoint_fn: Callable[[int], None] | None = None) -> list[dict]:
    """One pass over ``records`` (objects with ``id``, ``y`` and ``frames()``).

    Returns the per-step log records. A policy without trainable parameters
    (frozen mode) performs no optimiser steps and returns an empty log.
    """
    params = [p for p in policy.parameters() if p.requires_grad]
    if not params:
        return []
    if any(p.requires_grad for p in backbone.parameters()):
        raise ContractViolation("backbone must be frozen before GRPO training")
    if optimizer is None:
        optimizer, scheduler = make_optimizer(params, cfg, len(records) * cfg.epochs // cfg.grad_accumulation)
    state = state or TrainState()
    theta_before = tensor_digest(backbone.theta())
    gen = torch_generator(seed, "grpo-rollouts", epoch)
    order = numpy_rng(seed, "grpo-order", epoch).permutation(len(records))
    sink = open(log_file, "a") if log_file is not None else None
    policy.train()
    try:
        optimizer.zero_grad(set_to_none=True)
        for i, j in enumerate(order):
            rec = records[int(j)]
            t0 = time.perf_counter()
            vis = backbone.encode_frames(conditioning_frames(rec, backbone.cfg.n_frames))
            delta = policy.delta_for(vis)
            group = sample_group(backbone, vis, delta, rec.y, cfg.G, cfg.temperature, gen, cfg.max_new_tokens)
            parts = group_loss(backbone, vis, delta, group, cfg)
            loss = parts["loss"]
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite GRPO loss on sample {rec.id}", op_trace(loss))
            (loss / cfg.grad_accumulation).backward()
            if (i + 1) % cfg.grad_accumulation and i + 1 < len(order):
                continue
            gnorm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
            lr = optimizer.param_groups[0]["lr"]
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            optimizer.zero_grad(set_to_none=True)
            state.step += 1
            entry = dict(step=state.step, epoch=epoch, sample=rec.id, y=int(rec.y),
                         reward_mean=float(group.rewards.mean()), accuracy_mean=float(group.accuracy.mean()),
                         format_rate=float(group.format.mean()), loss=loss.item(), surrogate=parts["surrogate"].item(),
                         kl=parts["kl"].item(), grad_norm=float(gnorm), lr=lr,
                         seconds=round(time.perf_counter() - t0, 4))
            state.logs.append(entry)
            if sink is not None:
                sink.write(json.dumps(entry) + "\n")
                sink.flush()
            if checkpoint_fn is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                checkpoint_fn(state.step)
    finally:
        if sink is not None:
            sink.close()
        policy.eval()
    if tensor_digest(backbone.theta()) != theta_before:
        raise ContractViolation("backbone parameters changed during GRPO training")
    return state.logs


def train(records, backbone: Backbone, policy: nn.Module, cfg: GrpoConfig, *, seed: int = 0,
          log_file: str | Path | None = None, checkpoint_fn: Callable[[int], None] | None = None) -> list[dict]:
    """``cfg.epochs`` passes sharing one optimiser and learning-rate schedule."""
    params = [p for p in policy.parameters() if p.requires_grad]
    if not params:
        return []
    total = math.ceil(len(records) / cfg.grad_accumulation) * cfg.epochs
    opt, sched = make_optimizer(params, cfg, total)
    state = TrainState()
    for e in range(cfg.epochs):
        train_epoch(records, backbone, policy, cfg, seed=seed, epoch=e, optimizer=opt, scheduler=sched,
                    state=state, log_file=log_file, checkpoint_fn=checkpoint_fn)
    return state.logs


def config_dict(cfg: GrpoConfig) -> dict:
    d = asdict(cfg)
    d["adam_betas"] = list(cfg.adam_betas)
    return d
