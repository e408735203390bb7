"""Small shared builders for tests."""

import torch

from copra.backbone import Backbone, BackboneConfig
from copra.generator import GeneratorConfig, ParameterGenerator
from copra.numeric import torch_generator


def micro_backbone(seed=0, **kw):
    cfg = dict(n_layers=2, d_model=16, n_heads=2, prompt="compact", max_response_tokens=16)
    cfg.update(kw)
    return Backbone(BackboneConfig(**cfg), seed=seed).freeze()


def micro_generator(bb, seed=0, **kw):
    cfg = dict(internal_dim=32, n_heads=4, rank=2, alpha=4.0)
    cfg.update(kw)
    c = bb.cfg
    return ParameterGenerator(GeneratorConfig(**cfg), bb.sites, c.n_layers, c.d_model, c.n_frames,
                              c.n_patches, seed=seed)


def random_frames(seed, k=8, size=32, channels=1):
    return torch.rand(k, channels, size, size, generator=torch_generator(seed, "frames"))


def perturb_(module, seed, std=0.05):
    """Move every parameter of ``module`` off its initial value."""
    g = torch_generator(seed, "perturb")
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
