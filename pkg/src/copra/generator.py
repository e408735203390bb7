"""Conditional LoRA generator.

Learnable parameter tokens, one grid of ``L x s_l`` tokens, are refined by
blocks of factorized self-attention (within a backbone layer, then across
layers for the same slot), cross-attention to projected visual tokens and an
MLP. Two MLP heads decode A-slots and B-slots into ``r x d`` blocks that are
re-sliced into per-site ``(A, B)`` pairs. An optional learnable global latent
congruent to the output grid is added as a residual.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .lora import LoraDelta, LoraSite
from .numeric import ContractViolation, check_finite, torch_generator

PASSES = ("intra", "inter", "cross", "mlp")


@dataclass
class GeneratorConfig:
    depth: int | None = None       # None -> ceil(n_layers / 2)
    internal_dim: int = 512
    n_heads: int = 8
    rank: int = 8
    alpha: float = 16.0
    use_global_latent: bool = True
    block_order: tuple[str, ...] = PASSES
    mlp_ratio: int = 2

    def resolved_depth(self, n_layers: int) -> int:
        return self.depth if self.depth is not None else math.ceil(n_layers / 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_order"] = list(self.block_order)
        return d


@dataclass(frozen=True)
class Slot:
    site: LoraSite
    factor: str      # "A" or "B"
    part: int        # which d-wide column block of A (or of B^T)


@dataclass
class TokenLayout:
    """Packing of every site's factors into ``r x d`` tokens.

    A site with dims ``(d_in, d_out)`` takes ``ceil(d_in/d)`` A-tokens and
    ``ceil(d_out/d)`` B-tokens; the tail of the last token is generated and
    discarded when ``d`` does not divide the dimension.
    """

    sites: list[LoraSite]
    rank: int
    width: int
    n_layers: int
    slots: list[list[Slot]] = field(init=False)

    def __post_init__(self):
        per_layer: list[list[Slot]] = [[] for _ in range(self.n_layers)]
        for s in self.sites:
            for j in range(math.ceil(s.d_in / self.width)):
                per_layer[s.layer_index].append(Slot(s, "A", j))
            for j in range(math.ceil(s.d_out / self.width)):
                per_layer[s.layer_index].append(Slot(s, "B", j))
        sizes = {len(x) for x in per_layer}
        if len(sizes) != 1:
            raise ContractViolation("all backbone layers must expose the same injection sites")
        self.slots = per_layer

    @property
    def tokens_per_layer(self) -> int:
        return len(self.slots[0])

    @property
    def grid_shape(self) -> tuple[int, int, int, int]:
        return (self.n_layers, self.tokens_per_layer, self.rank, self.width)

    @property
    def grid_size(self) -> int:
        L, s, r, d = self.grid_shape
        return L * s * r * d

    def is_b_slot(self) -> torch.Tensor:
        return torch.tensor([slot.factor == "B" for slot in self.slots[0]])

    def budget_table(self) -> list[dict]:
        rows = []
        for s in self.sites:
            if s.layer_index:
                continue
            rows.append(dict(site=s.module_kind, d_in=s.d_in, d_out=s.d_out,
                             a_tokens=math.ceil(s.d_in / self.width),
                             b_tokens=math.ceil(s.d_out / self.width),
                             params=self.rank * (s.d_in + s.d_out)))
        return rows

    def to_delta(self, grid: torch.Tensor, alpha: float) -> LoraDelta:
        """Slice a ``(..., L, s, r, d)`` grid into per-site factors."""
        A, B = {}, {}
        for layer, slots in enumerate(self.slots):
            groups: dict[tuple[str, str], list[torch.Tensor]] = {}
            for k, slot in enumerate(slots):
                groups.setdefault((slot.site.name, slot.factor), []).append(grid[..., layer, k, :, :])
            for s in (x.site for x in slots if x.factor == "A" and x.part == 0):
                a = torch.cat(groups[(s.name, "A")], dim=-1)[..., :s.d_in]
                bt = torch.cat(groups[(s.name, "B")], dim=-1)[..., :s.d_out]
                A[s.name] = a
                B[s.name] = bt.transpose(-1, -2)
        return LoraDelta(self.sites, A, B, self.rank, alpha)

    def from_delta(self, delta: LoraDelta) -> torch.Tensor:
        """Inverse of :meth:`to_delta`; surplus tail entries are zero."""
        L, s, r, d = self.grid_shape
        lead = next(iter(delta.A.values())).shape[:-2]
        grid = torch.zeros(*lead, L, s, r, d, dtype=next(iter(delta.A.values())).dtype)
        for layer, slots in enumerate(self.slots):
            for k, slot in enumerate(slots):
                src = delta.A[slot.site.name] if slot.factor == "A" else delta.B[slot.site.name].transpose(-1, -2)
                block = src[..., slot.part * d:(slot.part + 1) * d]
                grid[..., layer, k, :, :block.shape[-1]] = block
        return grid


def attention(q_in, kv_in, proj_q, proj_k, proj_v, proj_o, n_heads, mask=None, key_bias=None,
              return_weights=False):
    """Multi-head attention over the token axis (``-2``).

    ``mask`` is a boolean ``(Tq, Tk)`` allow-matrix; ``key_bias`` adds a
    per-key offset to the pre-softmax scores.
    """
    q = proj_q(q_in)
    k = proj_k(kv_in)
    v = proj_v(kv_in)
    *lead, Tq, D = q.shape
    Tk = k.shape[-2]
    dh = D // n_heads
    q = q.reshape(*lead, Tq, n_heads, dh).transpose(-2, -3)
    k = k.reshape(*lead, Tk, n_heads, dh).transpose(-2, -3)
    v = v.reshape(*lead, Tk, n_heads, dh).transpose(-2, -3)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if key_bias is not None:
        scores = scores + key_bias
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    w = torch.softmax(scores, dim=-1)
    y = (w @ v).transpose(-2, -3).reshape(*lead, Tq, D)
    y = proj_o(y)
    return (y, w) if return_weights else y


class _MHA(nn.Module):
    def __init__(self, dim: int, n_heads: int, out_bias: bool = True):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim, bias=out_bias)

    def forward(self, x, kv=None, mask=None, key_bias=None, return_weights=False):
        kv = x if kv is None else kv
        return attention(x, kv, self.q, self.k, self.v, self.o, self.n_heads, mask, key_bias, return_weights)


def group_mask(n_layers: int, n_slots: int, kind: str) -> torch.Tensor:
    """Allow-matrix over flattened (layer, slot) tokens: ``intra`` keeps pairs
    in the same layer, ``inter`` pairs in the same slot."""
    layer = torch.arange(n_layers).repeat_interleave(n_slots)
    slot = torch.arange(n_slots).repeat(n_layers)
    key = layer if kind == "intra" else slot
    return key[:, None] == key[None, :]


class GeneratorBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: int, order: tuple[str, ...]):
        super().__init__()
        self.order = order
        self.ln = nn.ModuleDict({p: nn.LayerNorm(dim) for p in PASSES})
        self.intra = _MHA(dim, n_heads)
        self.inter = _MHA(dim, n_heads)
        self.cross = _MHA(dim, n_heads, out_bias=False)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, vis, masks):
        for p in self.order:
            h = self.ln[p](x)
            if p == "intra":
                x = x + self.intra(h, mask=masks["intra"])
            elif p == "inter":
                x = x + self.inter(h, mask=masks["inter"])
            elif p == "cross":
                x = x + self.cross(h, kv=vis)
            else:
                x = x + self.mlp(h)
        return x


class ParameterGenerator(nn.Module):
    """``g_phi2``: visual tokens -> LoRA delta for every backbone site."""

    def __init__(self, cfg: GeneratorConfig, sites: list[LoraSite], n_layers: int, d_model: int,
                 n_frames: int, n_patches: int, seed: int = 0):
        super().__init__()
        if cfg.internal_dim % cfg.n_heads:
            raise ContractViolation("internal_dim must be divisible by n_heads")
        if sorted(cfg.block_order) != sorted(PASSES):
            raise ContractViolation(f"block_order must be a permutation of {PASSES}")
        self.cfg = cfg
        self.n_frames = n_frames
        self.n_patches = n_patches
        self.layout = TokenLayout(sites, cfg.rank, d_model, n_layers)
        L, s, r, d = self.layout.grid_shape
        D = cfg.internal_dim
        self.depth = cfg.resolved_depth(n_layers)

        self.vis_in = nn.LayerNorm(d_model)
        self.vis_proj = nn.Linear(d_model, D)
        self.vis_pos = nn.Parameter(torch.zeros(n_frames * n_patches, D))
        self.tokens = nn.Parameter(torch.zeros(L, s, D))
        self.layer_emb = nn.Parameter(torch.zeros(L, D))
        self.slot_emb = nn.Parameter(torch.zeros(s, D))
        self.blocks = nn.ModuleList(GeneratorBlock(D, cfg.n_heads, cfg.mlp_ratio, tuple(cfg.block_order))
                                    for _ in range(self.depth))
        self.ln_out = nn.LayerNorm(D)
        self.head_a = nn.Sequential(nn.Linear(D, D), nn.GELU(), nn.Linear(D, r * d))
        self.head_b = nn.Sequential(nn.Linear(D, D), nn.GELU(), nn.Linear(D, r * d))
        if cfg.use_global_latent:
            self.p_global = nn.Parameter(torch.zeros(L, s, r, d))
        else:
            self.register_parameter("p_global", None)
        self.register_buffer("b_slots", self.layout.is_b_slot(), persistent=False)
        self.register_buffer("mask_intra", group_mask(L, s, "intra"), persistent=False)
        self.register_buffer("mask_inter", group_mask(L, s, "inter"), persistent=False)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch_generator(seed, "generator-init")
        r, d = self.cfg.rank, self.layout.width
        with torch.no_grad():
            for name, m in self.named_modules():
                if isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()
                elif isinstance(m, nn.Linear):
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) / math.sqrt(m.in_features))
                    if m.bias is not None:
                        m.bias.zero_()
            for p in (self.vis_pos, self.tokens, self.layer_emb, self.slot_emb):
                p.copy_(torch.randn(p.shape, generator=g) * 0.02)
            # generated A entries start near N(0, 1/d); B starts exactly zero
            self.head_a[-1].weight.mul_(1.0 / math.sqrt(d))
            self.head_b[-1].weight.zero_()
            self.head_b[-1].bias.zero_()
            if self.p_global is not None:
                self.p_global.zero_()

    # -- passes ------------------------------------------------------------

    def _flat(self, tokens):
        *lead, L, s, D = tokens.shape
        return tokens.reshape(*lead, L * s, D)

    def intra_layer_pass(self, tokens: torch.Tensor, block: int = 0, return_weights: bool = False):
        """Self-attention among tokens of the same backbone layer.

        ``tokens`` is ``(..., L, s, D)``; weights are returned over the
        flattened ``L*s`` axis when requested.
        """
        shape = tokens.shape
        L, s = shape[-3], shape[-2]
        out = self.blocks[block].intra(self._flat(tokens), mask=group_mask(L, s, "intra"),
                                       return_weights=return_weights)
        if return_weights:
            return out[0].reshape(shape), out[1]
        return out.reshape(shape)

    def inter_layer_pass(self, tokens: torch.Tensor, block: int = 0, return_weights: bool = False):
        """Self-attention among tokens sharing a slot index across layers."""
        shape = tokens.shape
        L, s = shape[-3], shape[-2]
        out = self.blocks[block].inter(self._flat(tokens), mask=group_mask(L, s, "inter"),
                                       return_weights=return_weights)
        if return_weights:
            return out[0].reshape(shape), out[1]
        return out.reshape(shape)

    def project_visual(self, vis: torch.Tensor) -> torch.Tensor:
        """``(..., K, T_v, d_model)`` -> ``(..., K*T_v, D)``."""
        if vis.shape[-3] != self.n_frames or vis.shape[-2] != self.n_patches:
            raise ContractViolation(f"generator expects {self.n_frames} frames x {self.n_patches} tokens, "
                                    f"got {vis.shape[-3]} x {vis.shape[-2]}")
        v = vis.reshape(*vis.shape[:-3], self.n_frames * self.n_patches, vis.shape[-1])
        return self.vis_proj(self.vis_in(v)) + self.vis_pos

    def cross_attend(self, tokens: torch.Tensor, vis_proj: torch.Tensor, block: int = 0,
                     key_bias: torch.Tensor | None = None) -> torch.Tensor:
        """Residual cross-attention of parameter tokens onto projected visual
        tokens (no pre-norm on ``vis_proj``)."""
        shape = tokens.shape
        blk = self.blocks[block]
        flat = self._flat(tokens)
        return (flat + blk.cross(blk.ln["cross"](flat), kv=vis_proj, key_bias=key_bias)).reshape(shape)

    def project_heads(self, tokens: torch.Tensor) -> torch.Tensor:
        """Decode ``(..., L, s, D)`` tokens into the ``(..., L, s, r, d)`` grid."""
        L, s, r, d = self.layout.grid_shape
        h = self.ln_out(tokens)
        a = self.head_a(h)
        b = self.head_b(h)
        out = torch.where(self.b_slots[:, None], b, a)
        return out.reshape(*tokens.shape[:-1], r, d)

    # -- full map ----------------------------------------------------------

    def refine(self, vis: torch.Tensor) -> torch.Tensor:
        v = self.project_visual(vis)
        lead = v.shape[:-2]
        x = self.tokens + self.layer_emb[:, None, :] + self.slot_emb[None, :, :]
        x = x.expand(*lead, *x.shape)
        masks = {"intra": self.mask_intra, "inter": self.mask_inter}
        flat = self._flat(x)
        for blk in self.blocks:
            flat = blk(flat, v, masks)
        return flat.reshape(x.shape)

    def grid(self, vis: torch.Tensor, use_global_latent: bool | None = None) -> torch.Tensor:
        out = self.project_heads(self.refine(vis))
        use = self.p_global is not None if use_global_latent is None else use_global_latent
        if use:
            if self.p_global is None:
                raise ContractViolation("generator was built without a global latent")
            out = out + self.p_global
        return check_finite(out, "generator.grid")

    def generate_delta(self, vis: torch.Tensor) -> LoraDelta:
        """Instance-conditioned delta for visual tokens ``(K, T_v, d)`` (or batched)."""
        return self.layout.to_delta(self.grid(vis), self.cfg.alpha)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def describe(self) -> dict:
        return dict(
            parameters=self.param_count(),
            depth=self.depth,
            internal_dim=self.cfg.internal_dim,
            grid_shape=list(self.layout.grid_shape),
            tokens_per_layer=self.layout.tokens_per_layer,
            grid_size=self.layout.grid_size,
            global_latent=self.p_global is not None,
            site_budget=self.layout.budget_table(),
        )
