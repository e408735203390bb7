"""Low-rank updates at the backbone's projection sites.

A :class:`LoraDelta` is the concrete carrier of a parameter update: for each
injection site it holds ``A`` (``r x d_in``) and ``B`` (``d_out x r``) and the
projection becomes ``y = W x + b + (alpha / r) * B (A x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import torch
import torch.nn.functional as F

from .numeric import ContractViolation, torch_generator

FUSED_KINDS = ("qkv_fused", "out_proj", "gate", "up", "down")
UNFUSED_KINDS = ("q", "k", "v", "out_proj", "gate", "up", "down")


@dataclass(frozen=True)
class LoraSite:
    layer_index: int
    module_kind: str
    d_in: int
    d_out: int

    @property
    def name(self) -> str:
        return f"layers.{self.layer_index}.{self.module_kind}"


def site_dims(kind: str, d_model: int, d_ffn: int) -> tuple[int, int]:
    return {
        "qkv_fused": (d_model, 3 * d_model),
        "q": (d_model, d_model),
        "k": (d_model, d_model),
        "v": (d_model, d_model),
        "out_proj": (d_model, d_model),
        "gate": (d_model, d_ffn),
        "up": (d_model, d_ffn),
        "down": (d_ffn, d_model),
    }[kind]


def enumerate_sites(n_layers: int, d_model: int, d_ffn: int, fused_qkv: bool = True) -> list[LoraSite]:
    """Injection sites in a stable, config-derived order (layer-major)."""
    kinds = FUSED_KINDS if fused_qkv else UNFUSED_KINDS
    return [
        LoraSite(layer, kind, *site_dims(kind, d_model, d_ffn))
        for layer in range(n_layers)
        for kind in kinds
    ]


@dataclass
class LoraDelta:
    """Per-site ``(A, B)`` pairs.

    Tensors may carry a leading batch dimension, in which case row ``i`` of the
    batch is applied to row ``i`` of the activations.
    """

    sites: list[LoraSite]
    A: dict[str, torch.Tensor]
    B: dict[str, torch.Tensor]
    rank: int = 8
    alpha: float = 16.0
    _by_name: dict[str, LoraSite] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_name = {s.name: s for s in self.sites}
        for s in self.sites:
            a, b = self.A[s.name], self.B[s.name]
            if tuple(a.shape[-2:]) != (self.rank, s.d_in) or tuple(b.shape[-2:]) != (s.d_out, self.rank):
                raise ContractViolation(
                    f"site {s.name}: expected A (..,{self.rank},{s.d_in}) and B (..,{s.d_out},{self.rank}), "
                    f"got {tuple(a.shape)} and {tuple(b.shape)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def site(self, name: str) -> LoraSite:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def items(self) -> Iterator[tuple[LoraSite, torch.Tensor, torch.Tensor]]:
        for s in self.sites:
            yield s, self.A[s.name], self.B[s.name]

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for s in self.sites:
            out[f"{s.name}.A"] = self.A[s.name]
            out[f"{s.name}.B"] = self.B[s.name]
        return out

    def detach(self) -> "LoraDelta":
        return LoraDelta(self.sites, {k: v.detach() for k, v in self.A.items()},
                         {k: v.detach() for k, v in self.B.items()}, self.rank, self.alpha)

    def index(self, i: int) -> "LoraDelta":
        """Select one element of a batched delta."""
        return LoraDelta(self.sites, {k: v[i] for k, v in self.A.items()},
                         {k: v[i] for k, v in self.B.items()}, self.rank, self.alpha)

    def validate_against(self, sites: list[LoraSite]) -> None:
        if [s for s in sites] != self.sites:
            raise ContractViolation("delta sites do not match the backbone configuration")


def init_static_lora(sites: list[LoraSite], seed: int, rank: int = 8, alpha: float = 16.0,
                     dtype: torch.dtype | None = None) -> LoraDelta:
    """Standard adapter initialization: ``B = 0``; ``A ~ N(0, 1/d_in)``."""
    dtype = dtype or torch.get_default_dtype()
    A, B = {}, {}
    for s in sites:
        g = torch_generator(seed, "lora-init", s.name)
        A[s.name] = torch.randn(rank, s.d_in, generator=g, dtype=dtype) / math.sqrt(s.d_in)
        B[s.name] = torch.zeros(s.d_out, rank, dtype=dtype)
    return LoraDelta(sites, A, B, rank, alpha)


def apply_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None,
                  A: torch.Tensor | None = None, B: torch.Tensor | None = None,
                  scale: float = 1.0) -> torch.Tensor:
    """``W x + b + scale * B (A x)`` over the last axis of ``x``.

    ``A``/``B`` may be batched (``(batch, r, d_in)``/``(batch, d_out, r)``) to
    match a batched ``x`` of shape ``(batch, ..., d_in)``.
    """
    if x.shape[-1] != weight.shape[1]:
        raise ContractViolation(f"input width {x.shape[-1]} != projection d_in {weight.shape[1]}")
    y = F.linear(x, weight, bias)
    if A is None:
        return y
    if B.shape[-2] != weight.shape[0]:
        raise ContractViolation("low-rank factors do not match the projection shape")
    return y + scale * low_rank(x, A, B)


def low_rank(x: torch.Tensor, A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """``B (A x)`` over the last axis of ``x``; factors optionally batched."""
    if A.shape[-1] != x.shape[-1] or A.shape[-2] != B.shape[-1]:
        raise ContractViolation("low-rank factors do not match the input width")
    if A.dim() == 2:
        return F.linear(F.linear(x, A), B)
    shape = x.shape
    xf = x.reshape(shape[0], -1, shape[-1])
    return torch.bmm(torch.bmm(xf, A.transpose(1, 2)), B.transpose(1, 2)).reshape(*shape[:-1], -1)


def delta_param_count(sites: list[LoraSite], rank: int) -> int:
    return sum(rank * (s.d_in + s.d_out) for s in sites)
