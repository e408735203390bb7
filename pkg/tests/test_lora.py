import pytest
import torch

from copra.generator import GeneratorConfig, TokenLayout
from copra.lora import (
    LoraDelta, LoraSite, apply_forward, delta_param_count, enumerate_sites, init_static_lora,
)
from copra.numeric import ContractViolation, torch_generator


def test_sites_cover_qkv_output_gate_up_down():
    sites = enumerate_sites(2, 16, 64)
    assert [s.module_kind for s in sites[:5]] == ["qkv_fused", "out_proj", "gate", "up", "down"]
    assert len(sites) == 10
    assert sites[0].d_out == 48 and sites[4].d_in == 64
    assert enumerate_sites(2, 16, 64) == sites


def test_unfused_variant_splits_qkv():
    kinds = [s.module_kind for s in enumerate_sites(1, 16, 64, fused_qkv=False)]
    assert kinds == ["q", "k", "v", "out_proj", "gate", "up", "down"]


def test_init_scale_and_zero_b():
    sites = enumerate_sites(1, 16, 64)
    d = init_static_lora(sites, 0)
    assert d.scale == 2.0
    assert all(torch.count_nonzero(b) == 0 for b in d.B.values())
    e = init_static_lora(sites, 1)
    assert not torch.equal(d.A["layers.0.gate"], e.A["layers.0.gate"])
    assert all(torch.equal(d.B[k], e.B[k]) for k in d.B)


def test_init_a_std_is_inverse_sqrt_din():
    site = [LoraSite(0, "down", 4096, 16)]
    a = init_static_lora(site, 3, rank=64).A["layers.0.down"]
    assert abs(a.std().item() * 64 - 1.0) < 0.02


def test_zero_b_forward_is_frozen():
    g = torch_generator(0, "x")
    W, b, x = torch.randn(5, 4, generator=g), torch.randn(5, generator=g), torch.randn(3, 4, generator=g)
    A = torch.randn(2, 4, generator=g)
    assert torch.equal(apply_forward(x, W, b, A, torch.zeros(5, 2), 2.0), apply_forward(x, W, b))


def test_rank_one_hand_case():
    W = torch.zeros(4, 4)
    A = torch.eye(4)[:1]               # 1 x 4, first row of I
    B = torch.zeros(4, 1)
    B[0, 0] = 1.0                      # e1 e1^T slice
    x = torch.tensor([1.0, 0.0, 0.0, 0.0])
    y = apply_forward(x, W, None, A, B, 2.0) - W @ x
    assert torch.count_nonzero(y) == 1 and y[0].item() == 2.0


def test_apply_forward_linear_in_x():
    g = torch_generator(1, "lin")
    W, A, B = torch.randn(3, 4, generator=g), torch.randn(2, 4, generator=g), torch.randn(3, 2, generator=g)
    x1, x2 = torch.randn(4, generator=g), torch.randn(4, generator=g)
    lhs = apply_forward(x1 + x2, W, None, A, B, 2.0)
    rhs = apply_forward(x1, W, None, A, B, 2.0) + apply_forward(x2, W, None, A, B, 2.0)
    assert torch.allclose(lhs, rhs, atol=1e-5)


def test_shape_mismatch_rejected():
    with pytest.raises(ContractViolation):
        apply_forward(torch.zeros(3), torch.zeros(4, 4), None)
    with pytest.raises(ContractViolation):
        apply_forward(torch.zeros(4), torch.zeros(4, 4), None, torch.zeros(2, 4), torch.zeros(5, 2))
    site = LoraSite(0, "up", 4, 8)
    with pytest.raises(ContractViolation):
        LoraDelta([site], {site.name: torch.zeros(2, 5)}, {site.name: torch.zeros(8, 2)}, rank=2)


def test_batched_factors_apply_per_row():
    g = torch_generator(2, "batch")
    W = torch.randn(3, 4, generator=g)
    A, B = torch.randn(2, 2, 4, generator=g), torch.randn(2, 3, 2, generator=g)
    x = torch.randn(2, 5, 4, generator=g)
    y = apply_forward(x, W, None, A, B, 2.0)
    for i in range(2):
        assert torch.allclose(y[i], apply_forward(x[i], W, None, A[i], B[i], 2.0), atol=1e-6)


def test_param_count_examples():
    assert delta_param_count([LoraSite(0, "out_proj", 128, 128)], 8) == 2048
    sites = enumerate_sites(8, 128, 512)
    assert len(sites) == 40
    assert delta_param_count(sites, 16) == 2 * delta_param_count(sites, 8)


@pytest.mark.parametrize("L,d,fused", [(8, 128, True), (2, 16, True), (3, 24, False), (4, 64, True)])
def test_param_count_equals_generator_grid(L, d, fused):
    sites = enumerate_sites(L, d, 4 * d, fused)
    layout = TokenLayout(sites, 8, d, L)
    assert layout.grid_size == delta_param_count(sites, 8)
