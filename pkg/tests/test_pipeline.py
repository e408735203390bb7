import numpy as np
import pytest
import torch

from copra.numeric import ContractViolation
from copra.pipeline import (
    GRANULARITIES, SamplingConfig, aggregate_to_frames, build_chunks, build_segments, frames_to_tensor,
    retrieval_refine, score_segment, score_video, segment_weights, smooth_and_weight, uniform_indices,
)
from copra.policy import make_policy

from helpers import micro_backbone, micro_generator, perturb_


# -- sampling -----------------------------------------------------------------


def test_uniform_indices_examples():
    assert uniform_indices(80, 8) == [1, 11, 21, 31, 41, 51, 61, 71]
    assert uniform_indices(8, 8) == list(range(1, 9))
    assert uniform_indices(3, 8) == [1, 2, 3, 3, 3, 3, 3, 3]
    with pytest.raises(ContractViolation):
        uniform_indices(0, 8)


@pytest.mark.parametrize("n", [1, 7, 8, 9, 63, 1000, 2401])
def test_uniform_indices_in_range_and_sorted(n):
    idx = uniform_indices(n, 8)
    assert len(idx) == 8 and idx == sorted(idx) and 1 <= idx[0] and idx[-1] <= n


def test_segments_examples():
    segs = build_segments(200, 10.0)
    assert len(segs) == 13 and segs[-1].center == 192
    assert all(s.hi - s.lo <= 100 and s.lo <= s.center < s.hi for s in segs)
    one = build_segments(16, 10.0)
    assert len(one) == 1 and (one[0].lo, one[0].hi) == (0, 16)


@pytest.mark.parametrize("n,fps", [(1, 10.0), (15, 10.0), (100, 10.0), (2400, 10.0), (500, 1.0), (37, 0.5)])
def test_segments_cover_every_frame(n, fps):
    count = np.zeros(n)
    for s in build_segments(n, fps):
        count[s.lo:s.hi] += 1
        assert all(s.lo <= i < s.hi for i in s.indices)
    assert count.min() >= 1


def test_chunks_examples():
    segs = build_segments(2400, 10.0)
    chunks = build_chunks(2400, 10.0, "chunk120s", segs)
    assert [(lo, hi) for lo, hi, _ in chunks] == [(0, 1200), (1200, 2400)]
    segs = build_segments(300, 10.0)
    build_chunks(300, 10.0, "full_video", segs)
    assert {s.chunk_id for s in segs} == {0}
    chunks = build_chunks(300, 10.0, "segment10s", segs)
    assert len(chunks) == len(segs) and [s.chunk_id for s in segs] == list(range(len(segs)))


@pytest.mark.parametrize("g", [g for g in GRANULARITIES if g != "segment10s"])
@pytest.mark.parametrize("n", [1, 15, 100, 2400, 3001])
def test_chunks_partition(g, n):
    segs = build_segments(n, 10.0)
    chunks = build_chunks(n, 10.0, g, segs)
    assert chunks[0][0] == 0 and chunks[-1][1] == n
    assert all(a[1] == b[0] for a, b in zip(chunks, chunks[1:]))
    for s in segs:
        lo, hi, _ = chunks[s.chunk_id]
        assert lo <= s.center < hi


# -- aggregation and stages 2/3 ----------------------------------------------


def test_aggregate_examples():
    segs = build_segments(40, 10.0)
    assert np.all(aggregate_to_frames(segs, [0.3] * len(segs), 40) == 0.3)
    two = build_segments(20, 1.0)   # centres 0 and 16 overlap
    f = aggregate_to_frames(two, [0.4, 0.6], 20)
    both = (np.arange(20) >= two[1].lo) & (np.arange(20) < two[0].hi)
    assert np.allclose(f[both], 0.5)
    single = build_segments(10, 10.0)
    assert np.all(aggregate_to_frames(single, [0.7], 10) == 0.7)


def test_retrieval_examples():
    rng = np.random.default_rng(0)
    s = rng.random(12)
    emb = rng.normal(size=(12, 5))
    assert np.array_equal(retrieval_refine(s, emb, 1), s)
    same = np.ones((12, 5))
    assert np.allclose(retrieval_refine(s, same, 12), s.mean())
    assert np.allclose(retrieval_refine(np.full(12, 0.3), emb, 5), 0.3)
    with pytest.raises(ContractViolation):
        retrieval_refine(s, emb, 0)


def test_smoothing_examples():
    x = np.zeros(11)
    x[5] = 1.0
    y = smooth_and_weight(x, None, 5)
    assert np.allclose(y[3:8], 0.2) and np.allclose(np.delete(y, range(3, 8)), 0)
    c = np.full(30, 0.4)
    assert np.allclose(smooth_and_weight(c, np.ones(30), 7), 0.4)
    r = np.random.default_rng(1).random(30)
    assert np.array_equal(smooth_and_weight(r, np.ones(30), 7), smooth_and_weight(r, None, 7))


def test_weights_in_unit_interval_and_constant_scores():
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(20, 4))
    w = segment_weights(rng.random(20), emb)
    assert w.min() == 0.0 and w.max() == 1.0
    assert np.array_equal(segment_weights(np.full(20, 0.3), emb), np.ones(20))


# -- whole-video scoring --------------------------------------------------------


@pytest.fixture(scope="module")
def bb():
    return micro_backbone()


@pytest.fixture(scope="module")
def copra(bb):
    pol = make_policy("copra", bb, micro_generator(bb).cfg, seed=0)
    perturb_(pol, 3, 0.3)
    pol.eval()
    return pol


def _video(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, 1, 32, 32), dtype=np.uint8)


@pytest.mark.parametrize("g", list(GRANULARITIES))
@pytest.mark.parametrize("n", [1, 15, 100, 2400])
def test_all_granularities_run(bb, copra, g, n):
    vs = score_video(bb, copra, _video(n), 10.0, SamplingConfig(granularity=g))
    for track in (vs.track.s1, vs.track.s2, vs.track.s3):
        assert track.shape == (n,) and track.min() >= 0 and track.max() <= 1


def test_chunk_reuse_matches_regeneration_bitwise(bb, copra):
    frames = _video(1500, 4)
    cfg = SamplingConfig(granularity="chunk120s")
    cache = {}
    vs = score_video(bb, copra, frames, 10.0, cfg, delta_cache=cache)
    assert len(cache) == 2
    seg_vis = bb.encode_frames(torch.stack([frames_to_tensor(frames, s.indices) for s in vs.segments]))
    with torch.no_grad():
        for i, seg in enumerate(vs.segments):
            lo, hi, idx = vs.chunks[seg.chunk_id]
            fresh = copra.delta_for(bb.encode_frames(frames_to_tensor(frames, idx)))
            members = [j for j, s in enumerate(vs.segments) if s.chunk_id == seg.chunk_id]
            s, _ = bb.answer_scores(bb.prompt, seg_vis[members], fresh)
            assert s[members.index(i)].item() == seg.s1


def test_zero_update_matches_frozen(bb):
    fresh = make_policy("copra", bb, micro_generator(bb).cfg, seed=1)
    frames = _video(120, 5)
    a = score_video(bb, fresh, frames, 10.0)
    b = score_video(bb, make_policy("frozen", bb), frames, 10.0)
    assert np.array_equal(a.track.s3, b.track.s3)


def test_constant_segment_scores_propagate(bb, monkeypatch):
    monkeypatch.setattr(type(bb), "answer_scores",
                        lambda self, p, vis, delta, binary=False: (torch.full((vis.shape[0],), 0.37, dtype=torch.float64),
                                                                   torch.ones(vis.shape[0], dtype=torch.bool)))
    vs = score_video(bb, make_policy("frozen", bb), _video(333, 6), 10.0)
    for track in (vs.track.s1, vs.track.s2, vs.track.s3):
        assert np.allclose(track, 0.37, rtol=0, atol=1e-15)


def test_score_segment_uint8_and_float_agree(bb):
    fr = _video(8, 7)
    a = score_segment(bb, None, fr)
    b = score_segment(bb, None, fr.astype(np.float32) / 255.0)
    assert a == b and 0 <= a[0] <= 1


def test_binary_score_mode(bb, copra):
    vs = score_video(bb, copra, _video(200, 8), 10.0, SamplingConfig(score_mode="binary"))
    assert set(np.round([s.s1 for s in vs.segments], 6)) <= {0.0, 0.5, 1.0}
    with pytest.raises(ContractViolation):
        SamplingConfig(score_mode="vote")


def test_timing_keys(bb, copra):
    vs = score_video(bb, copra, _video(50, 9), 10.0)
    assert set(vs.timing) == {"parameter_generation", "response_generation"}
