import numpy as np
import pytest
import torch

from copra.backbone import Backbone, BackboneConfig
from copra.lora import init_static_lora
from copra.numeric import ContractViolation, tensor_digest, torch_generator
from copra.pretrain import PretrainConfig, format_validity, pretrain_backbone, split_corpus
from copra.synthdata import SynthConfig, generate_dataset, load_sft_corpus, pretrain_root

from helpers import micro_backbone, perturb_, random_frames


def test_default_config_shapes():
    cfg = BackboneConfig()
    assert (cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.max_response_tokens) == (8, 128, 4, 512, 256)
    assert cfg.n_patches == 16


def test_encode_frames_shape_and_determinism():
    bb = micro_backbone()
    v1 = bb.encode_frames(random_frames(0))
    assert v1.shape == (8, 16, 16)
    assert torch.equal(v1, micro_backbone().encode_frames(random_frames(0)))
    assert not v1.requires_grad


def test_encode_all_zero_frames_is_constant_per_patch_position():
    bb = micro_backbone()
    v = bb.encode_frames(torch.zeros(8, 1, 32, 32))
    assert torch.equal(v, v[:1].expand_as(v))


def test_encode_frames_rejects_wrong_size():
    bb = micro_backbone()
    with pytest.raises(ContractViolation):
        bb.encode_frames(torch.zeros(8, 1, 30, 30))


def test_zero_update_equals_frozen_bitwise():
    bb = micro_backbone()
    perturb_(bb, 1)
    vis = bb.encode_frames(random_frames(2))
    delta = init_static_lora(bb.sites, 3, rank=2, alpha=4.0)
    resp = bb.tokenizer.encode("<think>i see</think>")
    assert torch.equal(bb.forward_lm(bb.prompt, vis, delta, resp), bb.forward_lm(bb.prompt, vis, None, resp))
    assert torch.equal(bb.extract_embedding(bb.prompt, vis, delta), bb.extract_embedding(bb.prompt, vis))


def test_causality_under_future_perturbation():
    bb = micro_backbone()
    perturb_(bb, 4)
    vis = bb.encode_frames(random_frames(5))
    rng = np.random.default_rng(0)
    V = bb.tokenizer.vocab_size
    base = list(rng.integers(8, V, size=12))
    ref = bb.forward_lm(bb.prompt, vis, None, base)
    P = bb.prefix_len
    for _ in range(100):
        t = int(rng.integers(0, 12))
        alt = list(base)
        alt[t] = int((alt[t] + 1 + rng.integers(0, V - 9)) % (V - 8) + 8)
        out = bb.forward_lm(bb.prompt, vis, None, alt)
        assert torch.equal(out[:, :P + t], ref[:, :P + t])


def test_delta_continuity():
    bb = micro_backbone()
    vis = bb.encode_frames(random_frames(6))
    delta = init_static_lora(bb.sites, 7, rank=2, alpha=4.0)
    g = torch_generator(8, "B")
    for s in bb.sites:
        delta.B[s.name] = torch.randn(s.d_out, 2, generator=g)
    ref = bb.forward_lm(bb.prompt, vis)
    diffs = []
    for eps in (1e-2, 1e-4):
        d = type(delta)(delta.sites, delta.A, {k: v * eps for k, v in delta.B.items()}, 2, 4.0)
        diffs.append((bb.forward_lm(bb.prompt, vis, d) - ref).norm().item())
    assert diffs[1] < diffs[0] * 0.05
    assert diffs[1] < 1e-3 * ref.norm().item()


def test_site_mismatch_rejected():
    bb = micro_backbone()
    other = micro_backbone(n_layers=3)
    vis = bb.encode_frames(random_frames(0))
    with pytest.raises(ContractViolation):
        bb.forward_lm(bb.prompt, vis, init_static_lora(other.sites, 0, 2, 4.0))


def test_greedy_generation_repeatable_and_sampling_varies():
    bb = micro_backbone()
    perturb_(bb, 9, std=0.3)
    vis = bb.encode_frames(random_frames(10))
    t1, _ = bb.generate(bb.prompt, vis, None, temperature=0, max_len=16, seed=1)
    t2, _ = bb.generate(bb.prompt, vis, None, temperature=0, max_len=16, seed=2)
    assert t1 == t2
    ids, _, _ = bb.sample(bb.prompt, vis, None, 8, 1.0, 16, torch_generator(0, "s"))
    assert len({tuple(r.tolist()) for r in ids}) > 1


def test_returned_logprobs_match_rescoring():
    bb = micro_backbone()
    perturb_(bb, 11, std=0.3)
    vis = bb.encode_frames(random_frames(12))
    delta = init_static_lora(bb.sites, 13, 2, 4.0)
    for s in bb.sites:
        delta.B[s.name] = torch.randn(s.d_out, 2, generator=torch_generator(14, s.name)) * 0.1
    ids, logps, lengths = bb.sample(bb.prompt, vis, delta, 4, 1.0, 16, torch_generator(1, "s"))
    P = bb.prefix_len
    for g in range(4):
        n = int(lengths[g])
        logits = bb.forward_lm(bb.prompt, vis, delta, ids[g, :n])[0]
        lp = torch.log_softmax(logits[P - 1:P - 1 + n], -1).gather(1, ids[g, :n, None]).squeeze(1)
        assert torch.allclose(lp, logps[g, :n], atol=1e-6)


def test_extract_embedding_width_and_identity():
    bb = micro_backbone()
    vis = bb.encode_frames(random_frames(3))
    e = bb.extract_embedding(bb.prompt, vis)
    assert e.shape == (16,)
    assert torch.equal(e, bb.extract_embedding(bb.prompt, bb.encode_frames(random_frames(3))))


def test_full_prompt_variant_builds():
    bb = Backbone(BackboneConfig(n_layers=1, d_model=16, n_heads=2))
    assert bb.tokenizer.decode(bb.prompt.ids).endswith("<vid>\n")
    assert bb.prefix_len == len(bb.prompt.ids) - 1 + 8 * 16


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("sft")
    generate_dataset(SynthConfig(n_videos=4, pretrain_videos=24, min_frames=60, max_frames=90,
                                 window_min=20, window_max=30, seed=0), root)
    return root


def test_pretrain_zero_steps_keeps_init(tiny_corpus):
    bb = micro_backbone(seed=5)
    before = tensor_digest(bb.theta())
    res = pretrain_backbone(bb, load_sft_corpus(tiny_corpus), pretrain_root(tiny_corpus), PretrainConfig(steps=0))
    assert tensor_digest(bb.theta()) == before
    assert len(res.corpus_hash) == 64


def test_pretrain_empty_corpus_rejected(tiny_corpus):
    with pytest.raises(ContractViolation):
        pretrain_backbone(micro_backbone(), [], tiny_corpus, PretrainConfig(steps=1))


def test_pretrain_reduces_heldout_loss_and_learns_format(tiny_corpus):
    bb = micro_backbone(seed=1)
    corpus = load_sft_corpus(tiny_corpus)
    res = pretrain_backbone(bb, corpus, pretrain_root(tiny_corpus),
                            PretrainConfig(steps=120, batch_size=8, eval_every=60, holdout_fraction=0.2), seed=3)
    assert res.heldout[120] < res.heldout[0]
    assert all(not p.requires_grad for p in bb.parameters())
    _, held = split_corpus(corpus, 0.2)
    assert format_validity(bb, held, pretrain_root(tiny_corpus), max_len=16) >= 0.8
