"""Adaptation modes: which update, if any, is applied on top of the frozen
backbone.

* ``frozen`` -- no update;
* ``static_lora`` -- one shared, trainable :class:`LoraDelta` (the same for
  every input);
* ``copra`` -- a :class:`ParameterGenerator` maps the conditioning frames of
  each input to its own delta.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import Backbone
from .generator import GeneratorConfig, ParameterGenerator
from .lora import LoraDelta, init_static_lora

MODES = ("frozen", "static_lora", "copra")


class FrozenPolicy(nn.Module):
    mode = "frozen"
    conditional = False

    def delta_for(self, vis: torch.Tensor | None = None) -> LoraDelta | None:
        return None


class StaticLoraPolicy(nn.Module):
    mode = "static_lora"
    conditional = False

    def __init__(self, backbone: Backbone, rank: int = 8, alpha: float = 16.0, seed: int = 0):
        super().__init__()
        init = init_static_lora(backbone.sites, seed, rank, alpha)
        self.sites = backbone.sites
        self.rank, self.alpha = rank, alpha
        self.A = nn.ParameterDict({_key(s.name): nn.Parameter(init.A[s.name]) for s in self.sites})
        self.B = nn.ParameterDict({_key(s.name): nn.Parameter(init.B[s.name]) for s in self.sites})

    def delta_for(self, vis: torch.Tensor | None = None) -> LoraDelta:
        return LoraDelta(self.sites, {s.name: self.A[_key(s.name)] for s in self.sites},
                         {s.name: self.B[_key(s.name)] for s in self.sites}, self.rank, self.alpha)


class CopraPolicy(nn.Module):
    mode = "copra"
    conditional = True

    def __init__(self, backbone: Backbone, cfg: GeneratorConfig, seed: int = 0):
        super().__init__()
        bc = backbone.cfg
        self.generator = ParameterGenerator(cfg, backbone.sites, bc.n_layers, bc.d_model,
                                            bc.n_frames, bc.n_patches, seed)

    def delta_for(self, vis: torch.Tensor) -> LoraDelta:
        return self.generator.generate_delta(vis)


def _key(name: str) -> str:
    return name.replace(".", "_")


def make_policy(mode: str, backbone: Backbone, gen_cfg: GeneratorConfig | None = None,
                seed: int = 0) -> nn.Module:
    gen_cfg = gen_cfg or GeneratorConfig()
    if mode == "frozen":
        return FrozenPolicy()
    if mode == "static_lora":
        return StaticLoraPolicy(backbone, gen_cfg.rank, gen_cfg.alpha, seed)
    if mode == "copra":
        return CopraPolicy(backbone, gen_cfg, seed)
    raise ValueError(f"unknown adaptation mode {mode!r}; expected one of {MODES}")
