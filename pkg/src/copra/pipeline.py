"""Sliding-window inference: frame sampling, segments, chunks, segment scoring
and the three score stages.

Stage 1 aggregates segment scores to frames; stage 2 refines each segment
score with a similarity-weighted mean over its nearest segments in visual
embedding space; stage 3 smooths over time and re-weights frames by their
similarity to the most anomalous segments.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import uniform_filter1d

from .backbone import Backbone
from .lora import LoraDelta
from .numeric import ContractViolation

GRANULARITIES: dict[str, float | None] = {
    "segment10s": None,
    "chunk30s": 30.0,
    "chunk60s": 60.0,
    "chunk120s": 120.0,
    "chunk240s": 240.0,
    "full_video": math.inf,
}


@dataclass
class SamplingConfig:
    n_frames: int = 8
    segment_seconds: float = 10.0
    segment_center_stride_frames: int = 16
    granularity: str = "chunk120s"
    retrieval_k: int = 5
    smoothing_window: int = 50
    weighting_top_fraction: float = 0.1
    score_mode: str = "probability"     # or "binary": parse the greedy answer token

    def __post_init__(self):
        if self.n_frames < 1:
            raise ContractViolation("n_frames must be >= 1")
        if self.granularity not in GRANULARITIES:
            raise ContractViolation(f"granularity must be one of {list(GRANULARITIES)}")
        if self.score_mode not in ("probability", "binary"):
            raise ContractViolation("score_mode must be 'probability' or 'binary'")


@dataclass
class Segment:
    center: int
    lo: int
    hi: int
    indices: list[int]          # 0-based conditioning frames
    chunk_id: int = -1
    s1: float = float("nan")
    s2: float = float("nan")
    s3: float = float("nan")


@dataclass
class ScoreTrack:
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray

    def as_columns(self) -> np.ndarray:
        n = len(self.s1)
        return np.column_stack([np.arange(n), self.s1, self.s2, self.s3])


# ---------------------------------------------------------------------------
# Sampling and windows
# ---------------------------------------------------------------------------


def uniform_indices(n: int, k: int) -> list[int]:
    """1-based indices ``1, 1+S, ..., 1+(k-1)S`` with ``S = max(1, n // k)``,
    clamped to ``n``."""
    if n < 1:
        raise ContractViolation("need at least one frame")
    s = max(1, n // k)
    return [min(1 + i * s, n) for i in range(k)]


def span_indices(lo: int, hi: int, k: int) -> list[int]:
    """0-based conditioning frames for the half-open span ``[lo, hi)``."""
    return [lo + j - 1 for j in uniform_indices(hi - lo, k)]


def build_segments(n: int, fps: float, cfg: SamplingConfig | None = None) -> list[Segment]:
    """Windows centred every ``stride`` frames starting at frame 0.

    The half-width is ``round(seconds * fps) // 2`` but never below the stride,
    so consecutive windows always overlap and every frame is covered.
    """
    cfg = cfg or SamplingConfig()
    if fps <= 0:
        raise ContractViolation("fps must be positive")
    stride = cfg.segment_center_stride_frames
    half = max(int(round(cfg.segment_seconds * fps)) // 2, stride)
    segs = []
    for c in range(0, n, stride):
        lo, hi = max(0, c - half), min(n, c + half)
        segs.append(Segment(c, lo, hi, span_indices(lo, hi, cfg.n_frames)))
    return segs


def build_chunks(n: int, fps: float, granularity: str, segments: list[Segment],
                 k: int = 8) -> list[tuple[int, int, list[int]]]:
    """Chunks as ``(lo, hi, conditioning indices)``; assigns ``chunk_id`` on
    each segment (the chunk containing its centre)."""
    if granularity not in GRANULARITIES:
        raise ContractViolation(f"granularity must be one of {list(GRANULARITIES)}")
    seconds = GRANULARITIES[granularity]
    if seconds is None:
        chunks = []
        for i, s in enumerate(segments):
            chunks.append((s.lo, s.hi, list(s.indices)))
            s.chunk_id = i
        return chunks
    size = n if math.isinf(seconds) else max(1, int(round(seconds * fps)))
    chunks = [(lo, min(n, lo + size), span_indices(lo, min(n, lo + size), k)) for lo in range(0, n, size)]
    for s in segments:
        s.chunk_id = s.center // size
    return chunks


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


def frames_to_tensor(frames: np.ndarray, idx: list[int]) -> torch.Tensor:
    return torch.as_tensor(frames[idx].astype(np.float32) / 255.0)


def score_segment(backbone: Backbone, delta: LoraDelta | None, segment_frames: np.ndarray) -> tuple[float, bool]:
    """Score one segment from its ``K`` conditioning frames (uint8 or [0,1])."""
    fr = segment_frames.astype(np.float32) / 255.0 if segment_frames.dtype == np.uint8 else segment_frames
    vis = backbone.encode_frames(torch.as_tensor(fr))
    s, ok = backbone.answer_scores(backbone.prompt, vis, delta)
    return float(s[0]), bool(ok[0])


def aggregate_to_frames(segments: list[Segment], scores, n: int) -> np.ndarray:
    """Mean of the scores of every segment covering each frame."""
    total = np.zeros(n)
    count = np.zeros(n)
    for seg, s in zip(segments, scores):
        total[seg.lo:seg.hi] += s
        count[seg.lo:seg.hi] += 1
    if (count == 0).any():
        raise ContractViolation(f"frames {np.flatnonzero(count == 0)[:5].tolist()} are not covered by any segment")
    return total / count


# ---------------------------------------------------------------------------
# Stages 2 and 3
# ---------------------------------------------------------------------------


def _cosine(emb: np.ndarray) -> np.ndarray:
    e = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    return e @ e.T


def retrieval_refine(seg_scores, embeddings: np.ndarray, k: int = 5) -> np.ndarray:
    """Similarity-weighted mean of scores over each segment's ``k`` nearest
    segments (itself first); negative similarities count as zero."""
    if k < 1:
        raise ContractViolation("k must be >= 1")
    s = np.asarray(seg_scores, dtype=np.float64)
    m = len(s)
    sim = _cosine(np.asarray(embeddings, dtype=np.float64))
    out = np.empty(m)
    for i in range(m):
        others = np.array([j for j in np.argsort(-sim[i], kind="stable") if j != i], dtype=int)
        nbrs = np.concatenate([[i], others[:k - 1]]).astype(int)
        w = np.clip(sim[i, nbrs], 0.0, None)
        w[0] = 1.0
        out[i] = float(w @ s[nbrs] / w.sum())
    return out


def segment_weights(seg_scores, embeddings: np.ndarray, top_fraction: float = 0.1) -> np.ndarray:
    """Min-max normalised cosine similarity to the mean embedding of the
    top-scored segments. All ones when the scores are constant (no top set
    can be singled out, up to 1e-12) or the similarities are."""
    s = np.asarray(seg_scores, dtype=np.float64)
    if s.size == 0 or s.max() - s.min() <= 1e-12:
        return np.ones_like(s)
    emb = np.asarray(embeddings, dtype=np.float64)
    top = np.argsort(-s, kind="stable")[:max(1, int(math.ceil(top_fraction * len(s))))]
    ref = emb[top].mean(0)
    e = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    sim = e @ (ref / max(np.linalg.norm(ref), 1e-12))
    span = sim.max() - sim.min()
    if span < 1e-12:
        return np.ones_like(sim)
    return (sim - sim.min()) / span


def smooth_and_weight(frame_scores, frame_weights=None, window: int = 50) -> np.ndarray:
    """Centred moving average (reflected ends), times weights, clamped to [0, 1]."""
    x = np.asarray(frame_scores, dtype=np.float64)
    sm = uniform_filter1d(x, size=max(1, int(window)), mode="reflect")
    if frame_weights is not None:
        sm = sm * np.asarray(frame_weights, dtype=np.float64)
    return np.clip(sm, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Whole-video scoring
# ---------------------------------------------------------------------------


@dataclass
class VideoScores:
    track: ScoreTrack
    segments: list[Segment]
    chunks: list[tuple[int, int, list[int]]]
    unreached: int = 0
    timing: dict = field(default_factory=dict)


@torch.no_grad()
def score_video(backbone: Backbone, policy, frames: np.ndarray, fps: float,
                cfg: SamplingConfig | None = None, delta_cache: dict | None = None) -> VideoScores:
    """Run stages 1-3 on one video (``frames``: uint8 ``(n, C, H, W)``).

    One delta is produced per chunk from the chunk's conditioning frames and
    reused for every segment whose centre falls in the chunk.
    """
    cfg = cfg or SamplingConfig()
    n = frames.shape[0]
    segments = build_segments(n, fps, cfg)
    chunks = build_chunks(n, fps, cfg.granularity, segments, cfg.n_frames)
    timing = {"parameter_generation": 0.0, "response_generation": 0.0}

    seg_vis = backbone.encode_frames(torch.stack([frames_to_tensor(frames, s.indices) for s in segments]))
    embeddings = seg_vis.mean(dim=(1, 2)).double().numpy()
    scores = np.full(len(segments), 0.5)
    unreached = 0
    for cid, (lo, hi, idx) in enumerate(chunks):
        members = [i for i, s in enumerate(segments) if s.chunk_id == cid]
        if not members:
            continue
        t0 = time.perf_counter()
        delta = None
        if getattr(policy, "conditional", False):
            key = (lo, hi)
            if delta_cache is not None and key in delta_cache:
                delta = delta_cache[key]
            else:
                delta = policy.delta_for(backbone.encode_frames(frames_to_tensor(frames, idx)))
                if delta_cache is not None:
                    delta_cache[key] = delta
        elif policy is not None:
            delta = policy.delta_for(None)
        t1 = time.perf_counter()
        s, ok = backbone.answer_scores(backbone.prompt, seg_vis[members], delta, binary=cfg.score_mode == "binary")
        timing["parameter_generation"] += t1 - t0
        timing["response_generation"] += time.perf_counter() - t1
        scores[members] = s.numpy()
        unreached += int((~ok).sum())

    s1 = aggregate_to_frames(segments, scores, n)
    seg_s2 = retrieval_refine(scores, embeddings, cfg.retrieval_k)
    s2 = aggregate_to_frames(segments, seg_s2, n)
    w = aggregate_to_frames(segments, segment_weights(seg_s2, embeddings, cfg.weighting_top_fraction), n)
    s3 = smooth_and_weight(s2, w, cfg.smoothing_window)
    for seg, a, b in zip(segments, scores, seg_s2):
        seg.s1, seg.s2 = float(a), float(b)
        seg.s3 = float(s3[seg.lo:seg.hi].mean())
    return VideoScores(ScoreTrack(s1, s2, s3), segments, chunks, unreached, timing)
