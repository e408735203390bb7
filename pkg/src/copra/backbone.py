"""Toy vision-language backbone.

A patch-based frame encoder produces visual tokens that replace a single
``<vid>`` placeholder in the prompt; a pre-norm causal transformer with fused
qkv projections and a gated feed-forward consumes prompt, visual tokens and
response. Every projection in the language model is a LoRA injection site.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .lora import LoraDelta, LoraSite, apply_forward, enumerate_sites, low_rank
from .numeric import ContractViolation, check_finite, torch_generator
from .tokenizer import COMPACT_PROMPT, Tokenizer, system_prompt


@dataclass
class BackboneConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    patch_size: int = 8
    image_size: int = 32
    channels: int = 1
    n_vis_layers: int = 2
    n_frames: int = 8
    max_response_tokens: int = 256
    prompt: str = "full"          # "full" (verbatim system prompt) or "compact"
    fused_qkv: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractViolation("d_model must be divisible by n_heads")
        if self.image_size % self.patch_size:
            raise ContractViolation("image_size must be a multiple of patch_size")
        if self.prompt not in ("full", "compact"):
            raise ContractViolation(f"unknown prompt variant {self.prompt!r}")

    @property
    def d_ffn(self) -> int:
        return 4 * self.d_model

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class PromptState:
    """Token ids of the conditioning prompt; ``<vid>`` marks where visual
    tokens are spliced in."""

    ids: list[int]
    vid_index: int
    s0: str = field(default="")

    def __post_init__(self):
        if not self.s0:
            self.s0 = hashlib.sha256(np.asarray(self.ids, dtype=np.int64).tobytes()).hexdigest()[:12]


def prompt_text(variant: str) -> str:
    body = system_prompt() if variant == "full" else COMPACT_PROMPT + "\n"
    return body + "<vid>\n"


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, x, causal: bool, lora=None, past=None):
        # lora: dict kind -> (A, B) plus "scale"
        b, t, d = x.shape
        h = self.n_heads
        if lora is None:
            qkv = self.qkv(x)
        elif "qkv_fused" in lora:
            qkv = apply_forward(x, self.qkv.weight, self.qkv.bias, *lora["qkv_fused"], lora["scale"])
        else:
            qkv = self.qkv(x)
            qkv = torch.cat([qkv[..., j * d:(j + 1) * d] + lora["scale"] * low_rank(x, *lora[kind])
                             for j, kind in enumerate(("q", "k", "v"))], dim=-1)
        q, k, v = qkv.split(d, dim=-1)
        q = q.view(b, t, h, d // h).transpose(1, 2)
        k = k.view(b, t, h, d // h).transpose(1, 2)
        v = v.view(b, t, h, d // h).transpose(1, 2)
        if past is not None:
            pk, pv = past
            if pk.shape[0] != b:
                pk, pv = pk.expand(b, -1, -1, -1), pv.expand(b, -1, -1, -1)
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
        new_past = (k, v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if causal:
            P = k.shape[2] - t
            qi = torch.arange(t).unsqueeze(1) + P
            kj = torch.arange(k.shape[2]).unsqueeze(0)
            scores = scores.masked_fill(kj > qi, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        if lora is None:
            y = self.out_proj(y)
        else:
            y = apply_forward(y, self.out_proj.weight, self.out_proj.bias, *lora["out_proj"], lora["scale"])
        return y, new_past


class GatedMLP(nn.Module):
    def __init__(self, d_model: int, d_ffn: int):
        super().__init__()
        self.gate = nn.Linear(d_model, d_ffn)
        self.up = nn.Linear(d_model, d_ffn)
        self.down = nn.Linear(d_ffn, d_model)

    def forward(self, x, lora=None):
        if lora is None:
            return self.down(F.silu(self.gate(x)) * self.up(x))
        s = lora["scale"]
        g = apply_forward(x, self.gate.weight, self.gate.bias, *lora["gate"], s)
        u = apply_forward(x, self.up.weight, self.up.bias, *lora["up"], s)
        return apply_forward(F.silu(g) * u, self.down.weight, self.down.bias, *lora["down"], s)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ffn: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = GatedMLP(d_model, d_ffn)

    def forward(self, x, causal=True, lora=None, past=None):
        a, new_past = self.attn(self.ln1(x), causal, lora, past)
        x = x + a
        x = x + self.mlp(self.ln2(x), lora)
        return x, new_past


class VisionEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch = nn.Linear(cfg.channels * p * p, cfg.d_model)
        self.pos = nn.Parameter(torch.zeros(cfg.n_patches, cfg.d_model))
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads, cfg.d_ffn) for _ in range(cfg.n_vis_layers))
        self.ln = nn.LayerNorm(cfg.d_model)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: (..., K, C, H, W) -> (..., K, T_v, d)
        cfg = self.cfg
        lead = frames.shape[:-3]
        C, H, W = frames.shape[-3:]
        if (C, H, W) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ContractViolation(f"frames must be (C,H,W)=({cfg.channels},{cfg.image_size},{cfg.image_size}), "
                                    f"got {(C, H, W)}")
        p = cfg.patch_size
        x = frames.reshape(-1, C, H // p, p, W // p, p).permute(0, 2, 4, 1, 3, 5).reshape(-1, cfg.n_patches, C * p * p)
        x = self.patch(x) + self.pos
        for blk in self.blocks:
            x, _ = blk(x, causal=False)
        x = self.ln(x)
        return x.reshape(*lead, cfg.n_patches, cfg.d_model)


def _group_lora(delta: LoraDelta | None, n_layers: int):
    if delta is None:
        return [None] * n_layers
    per_layer: list[dict | None] = [dict(scale=delta.scale) for _ in range(n_layers)]
    for site, A, B in delta.items():
        per_layer[site.layer_index][site.module_kind] = (A, B)
    return per_layer


class Backbone(nn.Module):
    """Frozen toy VLM ``f(.; theta)`` with a frame encoder as a submodule."""

    def __init__(self, cfg: BackboneConfig, tokenizer: Tokenizer | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer or Tokenizer()
        self.prompt = self._build_prompt()
        V, d = self.tokenizer.vocab_size, cfg.d_model
        self.max_positions = len(self.prompt.ids) - 1 + cfg.n_frames * cfg.n_patches + cfg.max_response_tokens + 1
        self.vision = VisionEncoder(cfg)
        self.tok_emb = nn.Embedding(V, d)
        self.pos_emb = nn.Embedding(self.max_positions, d)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.d_ffn) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, V, bias=False)
        self.sites: list[LoraSite] = enumerate_sites(cfg.n_layers, d, cfg.d_ffn, cfg.fused_qkv)
        self.reset_parameters(seed)

    # -- setup -------------------------------------------------------------

    def reset_parameters(self, seed: int) -> None:
        g = torch_generator(seed, "backbone-init")
        depth_scale = 1.0 / math.sqrt(2 * self.cfg.n_layers)
        with torch.no_grad():
            for name, m in self.named_modules():
                if isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()
                elif isinstance(m, nn.Linear):
                    std = 1.0 / math.sqrt(m.in_features)
                    if name.endswith(("out_proj", "down")):
                        std *= depth_scale
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * std)
                    if m.bias is not None:
                        m.bias.zero_()
                elif isinstance(m, nn.Embedding):
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * 0.02)
            self.vision.pos.copy_(torch.randn(self.vision.pos.shape, generator=g) * 0.02)

    def _build_prompt(self) -> PromptState:
        ids = self.tokenizer.encode(prompt_text(self.cfg.prompt))
        vid = self.tokenizer.id("<vid>")
        if ids.count(vid) != 1:
            raise ContractViolation("prompt must contain exactly one <vid> placeholder")
        return PromptState(ids, ids.index(vid))

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def theta(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items()}

    @property
    def n_visual_tokens(self) -> int:
        return self.cfg.n_frames * self.cfg.n_patches

    @property
    def prefix_len(self) -> int:
        return len(self.prompt.ids) - 1 + self.n_visual_tokens

    # -- vision ------------------------------------------------------------

    def encode_frames(self, frames: torch.Tensor, grad: bool = False) -> torch.Tensor:
        """Visual tokens ``(K, T_v, d)`` (or batched) from frames in [0, 1]."""
        frames = torch.as_tensor(frames, dtype=self.tok_emb.weight.dtype)
        if frames.dim() < 4 or frames.shape[-4] < 1:
            raise ContractViolation("frames must be (K, C, H, W) with K >= 1")
        with torch.set_grad_enabled(grad):
            return check_finite(self.vision(frames), "encode_frames")

    # -- language model ----------------------------------------------------

    def _embed_prefix(self, prompt: PromptState, vis: torch.Tensor) -> torch.Tensor:
        if vis.dim() == 3:
            vis = vis.unsqueeze(0)
        b, K, T, d = vis.shape
        if K != self.cfg.n_frames or T != self.cfg.n_patches:
            raise ContractViolation(f"expected {self.cfg.n_frames} frames of {self.cfg.n_patches} tokens, got {K}x{T}")
        pre = torch.as_tensor(prompt.ids[:prompt.vid_index])
        post = torch.as_tensor(prompt.ids[prompt.vid_index + 1:])
        x = torch.cat([
            self.tok_emb(pre).unsqueeze(0).expand(b, -1, -1),
            vis.reshape(b, K * T, d),
            self.tok_emb(post).unsqueeze(0).expand(b, -1, -1),
        ], dim=1)
        return x + self.pos_emb(torch.arange(x.shape[1]))

    def run_blocks(self, x: torch.Tensor, delta: LoraDelta | None, past=None, start: int = 0):
        if delta is not None:
            delta.validate_against(self.sites)
        per_layer = _group_lora(delta, self.cfg.n_layers)
        new_past = []
        for i, blk in enumerate(self.blocks):
            x, kv = blk(x, True, per_layer[i], None if past is None else past[i])
            new_past.append(kv)
        return self.ln_f(x), new_past

    def prefix(self, prompt: PromptState, vis: torch.Tensor, delta: LoraDelta | None):
        """Process the conditioning prefix; returns (final hidden states, kv cache)."""
        return self.run_blocks(self._embed_prefix(prompt, vis), delta)

    def continue_lm(self, ids: torch.Tensor, past, start: int, delta: LoraDelta | None):
        """Feed response ids ``(b, t)`` after a cached prefix ending at ``start``."""
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(start, start + ids.shape[1]))
        return self.run_blocks(x, delta, past)

    def forward_lm(self, prompt: PromptState, vis: torch.Tensor, delta: LoraDelta | None = None,
                   response_ids: Sequence[int] | torch.Tensor | None = None) -> torch.Tensor:
        """Per-position logits over prefix (+ response) for one conditioning state."""
        x = self._embed_prefix(prompt, vis)
        if response_ids is not None and len(response_ids):
            r = torch.as_tensor(response_ids).reshape(1, -1).expand(x.shape[0], -1)
            x = torch.cat([x, self.tok_emb(r) + self.pos_emb(torch.arange(x.shape[1], x.shape[1] + r.shape[1]))], 1)
        h, _ = self.run_blocks(x, delta)
        return check_finite(self.lm_head(h), "forward_lm")

    def teacher_forced_logits(self, prompt: PromptState, vis: torch.Tensor, responses: torch.Tensor,
                              delta: LoraDelta | None = None) -> torch.Tensor:
        """Logits predicting each token of ``responses`` ``(b, O)``, one
        conditioning state per row (``vis`` is ``(b, K, T_v, d)``)."""
        x = self._embed_prefix(prompt, vis)
        P = x.shape[1]
        r = self.tok_emb(responses[:, :-1]) + self.pos_emb(torch.arange(P, P + responses.shape[1] - 1))
        h, _ = self.run_blocks(torch.cat([x, r], 1), delta)
        return self.lm_head(h[:, P - 1:])

    def response_logits(self, prompt: PromptState, vis: torch.Tensor, delta: LoraDelta | None,
                        responses: torch.Tensor) -> torch.Tensor:
        """Logits predicting each token of padded ``responses`` ``(G, O)``.

        The prefix is processed once and shared across the group.
        """
        h_pre, past = self.prefix(prompt, vis, delta)
        G = responses.shape[0]
        start = h_pre.shape[1]
        first = self.lm_head(h_pre[:, -1:]).expand(G, -1, -1)
        if responses.shape[1] == 1:
            return first
        h, _ = self.continue_lm(responses[:, :-1], past, start, delta)
        return torch.cat([first, self.lm_head(h)], dim=1)

    # -- decoding ----------------------------------------------------------

    @torch.no_grad()
    def sample(self, prompt: PromptState, vis: torch.Tensor, delta: LoraDelta | None, n: int = 1,
               temperature: float = 1.0, max_len: int | None = None, generator: torch.Generator | None = None,
               stop_ids: Sequence[int] = ()) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Decode ``n`` responses sharing one conditioning state.

        Returns (ids ``(n, O)`` padded with ``<pad>``, per-token log-probs of the
        emitted tokens under the untempered policy, lengths). Decoding stops at
        ``<eos>`` (kept in the response) or any of ``stop_ids``.
        """
        if temperature < 0:
            raise ContractViolation("temperature must be >= 0")
        max_len = self.cfg.max_response_tokens if max_len is None else min(max_len, self.cfg.max_response_tokens)
        eos, pad = self.tokenizer.id("<eos>"), self.tokenizer.id("<pad>")
        stops = torch.as_tensor([eos, *stop_ids])
        h, past = self.prefix(prompt, vis, delta)
        pos = h.shape[1]
        logits = self.lm_head(h[:, -1])
        if logits.shape[0] != n:
            logits = logits.expand(n, -1)
        ids = torch.full((n, max_len), pad, dtype=torch.long)
        logps = torch.zeros(n, max_len, dtype=logits.dtype)
        done = torch.zeros(n, dtype=torch.bool)
        lengths = torch.full((n,), max_len, dtype=torch.long)
        for t in range(max_len):
            logp = torch.log_softmax(logits, dim=-1)
            if temperature == 0:
                tok = logits.argmax(-1)
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                tok = torch.multinomial(probs, 1, generator=generator).squeeze(1)
            tok = torch.where(done, torch.full_like(tok, pad), tok)
            ids[:, t] = tok
            logps[:, t] = torch.where(done, torch.zeros(()), logp.gather(1, tok[:, None]).squeeze(1))
            finished = ~done & torch.isin(tok, stops)
            lengths[finished] = t + 1
            done |= finished
            if bool(done.all()) or t == max_len - 1:
                break
            h, past = self.continue_lm(tok[:, None], past, pos, delta)
            pos += 1
            logits = self.lm_head(h[:, -1])
        width = int(lengths.max())
        return ids[:, :width], logps[:, :width], lengths

    @torch.no_grad()
    def answer_scores(self, prompt: PromptState, vis: torch.Tensor, delta: LoraDelta | None,
                      max_len: int | None = None, binary: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        """Greedy-decode each row up to ``<answer>`` and read the answer slot.

        ``vis`` is ``(b, K, T_v, d)``. Returns ``P("1") / (P("0") + P("1"))`` at
        the answer position and a mask of rows that reached it (unreached rows
        score 0.5). With ``binary`` the greedy answer token is parsed instead:
        1.0 for "1", 0.0 for "0", and 0.5 (flagged unreached) for anything else.
        """
        if vis.dim() == 3:
            vis = vis.unsqueeze(0)
        tk = self.tokenizer
        max_len = self.cfg.max_response_tokens if max_len is None else max_len
        eos, pad, ans = tk.id("<eos>"), tk.id("<pad>"), tk.id("<answer>")
        zero, one = tk.id("0"), tk.id("1")
        b = vis.shape[0]
        h, past = self.prefix(prompt, vis, delta)
        pos = h.shape[1]
        logits = self.lm_head(h[:, -1])
        scores = torch.full((b,), 0.5, dtype=torch.float64)
        reached = torch.zeros(b, dtype=torch.bool)
        done = torch.zeros(b, dtype=torch.bool)
        pending = torch.zeros(b, dtype=torch.bool)
        for t in range(max_len + 1):
            if bool(pending.any()):
                sel = logits[pending]
                if binary:
                    top = sel.argmax(-1)
                    parsed = (top == zero) | (top == one)
                    rows = pending.nonzero().squeeze(1)
                    scores[rows[parsed]] = (top[parsed] == one).double()
                    reached[rows[parsed]] = True
                else:
                    pair = sel[:, [zero, one]].double()
                    scores[pending] = torch.sigmoid(pair[:, 1] - pair[:, 0])
                    reached |= pending
                done |= pending
                pending[:] = False
            if bool(done.all()) or t == max_len:
                break
            tok = logits.argmax(-1)
            tok = torch.where(done, torch.full_like(tok, pad), tok)
            pending = ~done & (tok == ans)
            done |= ~done & (tok == eos)
            h, past = self.continue_lm(tok[:, None], past, pos, delta)
            pos += 1
            logits = self.lm_head(h[:, -1])
        return scores, reached

    def generate(self, prompt: PromptState, vis: torch.Tensor, delta: LoraDelta | None = None,
                 temperature: float = 1.0, max_len: int = 256, seed: int = 0) -> tuple[str, torch.Tensor]:
        g = torch_generator(seed, "generate")
        ids, logps, lengths = self.sample(prompt, vis, delta, 1, temperature, max_len, g)
        n = int(lengths[0])
        return self.tokenizer.decode(ids[0, :n]), logps[0, :n]

    @torch.no_grad()
    def extract_embedding(self, prompt: PromptState, vis: torch.Tensor, delta: LoraDelta | None = None) -> torch.Tensor:
        """Last-layer hidden state at the final input position."""
        h, _ = self.prefix(prompt, vis, delta)
        return h[0, -1].clone()

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
