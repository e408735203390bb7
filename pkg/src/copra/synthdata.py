"""Deterministic synthetic video-anomaly benchmark.

Every video shows a bright disc drifting linearly over a textured background
and bouncing off the borders. Abnormal videos contain one contiguous window
realising one of three anomaly types:

``speed_burst``
    the disc moves 4-6x faster (rendered with motion smear);
``flash_event``
    the whole frame flickers brighter;
``object_vanish``
    the disc is not drawn.

Geometry is integer-only (1/16 px fixed point) and pixels are 8-bit, so the
manifest digest is stable across platforms.

Directory layout::

    manifest.jsonl          one JSON record per video
    frames/<id>.bin         uint32 LE header (width, height, channels, n_frames)
                            followed by uint8 frames, row-major (frame, channel, row, col)
    dataset_info.json       config, digest, stratification and probe diagnostics
    pretrain/               independent videos for the backbone bootstrap:
        manifest.jsonl, frames/<id>.bin
        sft.jsonl           conditioning indices + gold response per item
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numeric import ContractViolation, numpy_rng
from .pipeline import span_indices

log = logging.getLogger(__name__)

ANOMALY_TYPES = ("speed_burst", "flash_event", "object_vanish")
THINK_PHRASES = (
    "i watched the frames",
    "i looked at the sequence",
    "i see an object moving across the scene",
    "i checked the frames over time",
)
FP = 16  # fixed-point subdivisions per pixel
PRETRAIN_DIR = "pretrain"


@dataclass
class SynthConfig:
    n_videos: int = 250
    min_frames: int = 150
    max_frames: int = 400
    fps: float = 10.0
    frame_size: int = 32
    channels: int = 1
    anomaly_types: tuple[str, ...] = ANOMALY_TYPES
    window_min: int = 30
    window_max: int = 80
    abnormal_fraction: float = 0.5
    train_fraction: float = 0.8
    sft_windows_per_video: int = 4
    n_frames_conditioning: int = 8
    pretrain_videos: int = 100
    pretrain_anomaly_types: tuple[str, ...] = ANOMALY_TYPES
    # per-video scene variation: background grey level and disc speed (1/16 px per frame)
    background_range: tuple[int, int] = (20, 70)
    speed_range: tuple[int, int] = (8, 24)
    seed: int = 0

    def __post_init__(self):
        self.anomaly_types = tuple(self.anomaly_types)
        self.pretrain_anomaly_types = tuple(self.pretrain_anomaly_types)
        self.background_range = tuple(int(v) for v in self.background_range)
        self.speed_range = tuple(int(v) for v in self.speed_range)
        if not 0 <= self.background_range[0] <= self.background_range[1] <= 200:
            raise ContractViolation("background_range must satisfy 0 <= lo <= hi <= 200")
        if not 1 <= self.speed_range[0] <= self.speed_range[1]:
            raise ContractViolation("speed_range must satisfy 1 <= lo <= hi")
        bad = (set(self.anomaly_types) | set(self.pretrain_anomaly_types)) - set(ANOMALY_TYPES)
        if bad:
            raise ContractViolation(f"unknown anomaly types {sorted(bad)}")
        if not 0.0 < self.abnormal_fraction < 1.0:
            raise ContractViolation("abnormal_fraction must lie in (0, 1)")
        if not 1 <= self.window_min <= self.window_max:
            raise ContractViolation("need 1 <= window_min <= window_max")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ContractViolation("need 1 <= min_frames <= max_frames")
        if self.window_min > self.max_frames:
            raise ContractViolation("anomaly windows cannot fit in any video length")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anomaly_types"] = list(self.anomaly_types)
        d["pretrain_anomaly_types"] = list(self.pretrain_anomaly_types)
        d["background_range"] = list(self.background_range)
        d["speed_range"] = list(self.speed_range)
        return d


@dataclass(frozen=True)
class TrainRecord:
    """Training-path view of a video: weak label only."""

    id: str
    blob: Path
    fps: float
    n_frames: int
    y: int
    anomaly_type: str

    def frames(self) -> np.ndarray:
        return read_blob(self.blob, self.id)


@dataclass(frozen=True)
class TestRecord(TrainRecord):
    """Evaluation view: adds hidden frame-level ground truth."""

    frame_labels: np.ndarray = field(default=None, compare=False, repr=False)


# ---------------------------------------------------------------------------
# Blob I/O
# ---------------------------------------------------------------------------


def write_blob(path: Path, frames: np.ndarray) -> None:
    n, c, h, w = frames.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<4I", w, h, c, n))
        f.write(np.ascontiguousarray(frames, dtype=np.uint8).tobytes())


def read_blob(path: Path, video_id: str = "?") -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"frame blob for video {video_id} unreadable: {path}") from e
    w, h, c, n = struct.unpack("<4I", raw[:16])
    body = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if body.size != n * c * h * w:
        raise OSError(f"frame blob for video {video_id} is truncated: {path}")
    return body.reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _disc(size: int, cx: int, cy: int, radius: int) -> np.ndarray:
    grid = (np.arange(size, dtype=np.int64) * FP + FP // 2)
    dx = grid[None, :] - cx
    dy = grid[:, None] - cy
    return dx * dx + dy * dy <= (radius * FP) ** 2


def render_video(rng: np.random.Generator, n: int, size: int, channels: int,
                 anomaly: str | None, window: tuple[int, int] | None,
                 background: tuple[int, int] = (20, 70), speed_range: tuple[int, int] = (8, 24)) -> np.ndarray:
    bg = int(rng.integers(background[0], background[1] + 1))
    texture = rng.integers(0, 12, size=(size, size), dtype=np.int64)
    radius = int(rng.integers(3, 6))
    level = int(rng.integers(160, 241))
    lo, hi = (radius + 1) * FP, (size - radius - 1) * FP
    x, y = int(rng.integers(lo, hi)), int(rng.integers(lo, hi))
    speed = int(rng.integers(speed_range[0], speed_range[1] + 1))
    angle = rng.integers(0, 360)
    vx = int(round(speed * np.cos(np.deg2rad(angle))))
    vy = int(round(speed * np.sin(np.deg2rad(angle))))
    if vx == 0 and vy == 0:
        vx = speed
    burst = int(rng.integers(4, 7))
    flicker = rng.integers(70, 141, size=n)
    noise = rng.integers(0, 4, size=(n, size, size), dtype=np.int64)

    frames = np.empty((n, channels, size, size), dtype=np.uint8)
    for t in range(n):
        active = window is not None and window[0] <= t < window[1]
        mult = burst if (active and anomaly == "speed_burst") else 1
        px, py = x, y
        x += vx * mult
        y += vy * mult
        if not lo <= x <= hi:
            vx = -vx
            x = min(max(x, lo), hi)
        if not lo <= y <= hi:
            vy = -vy
            y = min(max(y, lo), hi)
        img = bg + texture + noise[t]
        if not (active and anomaly == "object_vanish"):
            steps = max(1, max(abs(x - px), abs(y - py)) // FP)
            mask = np.zeros((size, size), dtype=bool)
            for k in range(1, steps + 1):
                mask |= _disc(size, px + (x - px) * k // steps, py + (y - py) * k // steps, radius)
            img = np.where(mask, level, img)
        if active and anomaly == "flash_event":
            img = img + int(flicker[t])
        frames[t] = np.clip(img, 0, 255).astype(np.uint8)[None]
    return frames


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def _gold(rng: np.random.Generator, y: int) -> str:
    phrase = THINK_PHRASES[int(rng.integers(len(THINK_PHRASES)))]
    return f"<think>{phrase}</think><answer>{y}</answer>"


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> dict:
    """Write the benchmark (manifest + frame blobs) and, under ``pretrain/``, an
    independent set of videos with the supervised corpus; return dataset info."""
    out = Path(out_dir)
    n_abn, resampled = _write_videos(out, cfg.seed, "video", cfg.n_videos, cfg.anomaly_types, cfg, sft=False)
    pre = None
    if cfg.pretrain_videos > 0:
        pdir = out / PRETRAIN_DIR
        _write_videos(pdir, cfg.seed, "pretrain-video", cfg.pretrain_videos, cfg.pretrain_anomaly_types, cfg, sft=True)
        pre = dict(n_videos=cfg.pretrain_videos, anomaly_types=list(cfg.pretrain_anomaly_types),
                   digest=dataset_digest(pdir))
    info = dict(config=cfg.to_dict(), digest=dataset_digest(out), n_abnormal=n_abn,
                n_videos=cfg.n_videos, resampled=resampled, probe_auc=separability_probe(out, cfg.train_fraction),
                pretrain=pre)
    (out / "dataset_info.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return info


def _write_videos(out: Path, seed: int, stream: str, n_videos: int, types_pool: tuple[str, ...],
                  cfg: SynthConfig, sft: bool) -> tuple[int, int]:
    (out / "frames").mkdir(parents=True, exist_ok=True)
    n_abn = int(round(cfg.abnormal_fraction * n_videos))
    order = numpy_rng(seed, stream, "labels").permutation(n_videos)
    abnormal = np.zeros(n_videos, dtype=bool)
    abnormal[order[:n_abn]] = True
    types = {int(v): types_pool[j % len(types_pool)] for j, v in enumerate(sorted(order[:n_abn]))}

    records, resampled = [], 0
    sft_lines = []
    for i in range(n_videos):
        vid = f"vid{i:05d}"
        rng = numpy_rng(seed, stream, i)
        n = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        anomaly, window = None, None
        if abnormal[i]:
            while n < cfg.window_min:
                resampled += 1
                n = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
            w = int(rng.integers(cfg.window_min, min(cfg.window_max, n) + 1))
            s = int(rng.integers(0, n - w + 1))
            anomaly, window = types[i], (s, s + w)
        frames = render_video(rng, n, cfg.frame_size, cfg.channels, anomaly, window,
                              cfg.background_range, cfg.speed_range)
        labels = np.zeros(n, dtype=np.int8)
        if window:
            labels[window[0]:window[1]] = 1
        write_blob(out / "frames" / f"{vid}.bin", frames)
        records.append(dict(
            id=vid, blob=f"frames/{vid}.bin", fps=cfg.fps, n_frames=n,
            width=cfg.frame_size, height=cfg.frame_size, channels=cfg.channels,
            y=int(abnormal[i]), anomaly_type=anomaly or "none",
            anomaly_window=list(window) if window else None,
            frame_labels="".join(map(str, labels.tolist())),
        ))
        if sft:
            sft_lines.extend(_sft_samples(cfg, rng, vid, n, labels))
    if resampled:
        log.info("resampled %d video lengths too short for an anomaly window", resampled)

    (out / "manifest.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    if sft:
        (out / "sft.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in sft_lines))
    return n_abn, resampled


def _sft_samples(cfg: SynthConfig, rng: np.random.Generator, vid: str, n: int, labels: np.ndarray) -> list[dict]:
    k = cfg.n_frames_conditioning
    seg = max(1, int(round(10 * cfg.fps)))
    spans = [(0, n)]
    for _ in range(cfg.sft_windows_per_video):
        w = min(seg, n)
        s = int(rng.integers(0, n - w + 1))
        spans.append((s, s + w))
    out = []
    for lo, hi in spans:
        idx = span_indices(lo, hi, k)
        y = int(labels[idx].max())
        out.append(dict(id=vid, indices=idx, response=_gold(rng, y)))
    return out


def dataset_digest(root: str | Path) -> str:
    root = Path(root)
    h = hashlib.sha256()
    manifest = (root / "manifest.jsonl").read_bytes()
    h.update(manifest)
    for line in manifest.decode().splitlines():
        rec = json.loads(line)
        h.update((root / rec["blob"]).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def read_manifest(root: str | Path) -> list[dict]:
    path = Path(root) / "manifest.jsonl"
    try:
        text = path.read_text()
    except OSError as e:
        raise FileNotFoundError(f"manifest not found: {path}") from e
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def split_ids(ids: list[str], train_fraction: float = 0.8) -> tuple[list[str], list[str]]:
    """Rank ids by SHA-256 and cut at ``train_fraction``; each side sorted by id."""
    ranked = sorted(ids, key=lambda i: hashlib.sha256(i.encode()).hexdigest())
    cut = int(round(train_fraction * len(ids)))
    return sorted(ranked[:cut]), sorted(ranked[cut:])


def load_split(root: str | Path, split: str, train_fraction: float | None = None) -> list[TrainRecord]:
    """Records of one split. The train split never carries frame labels."""
    if split not in ("train", "test"):
        raise ContractViolation(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root)
    recs = read_manifest(root)
    if train_fraction is None:
        info = root / "dataset_info.json"
        train_fraction = json.loads(info.read_text())["config"]["train_fraction"] if info.exists() else 0.8
    train_ids, test_ids = split_ids([r["id"] for r in recs], train_fraction)
    wanted = set(train_ids if split == "train" else test_ids)
    out: list[TrainRecord] = []
    for r in recs:
        if r["id"] not in wanted:
            continue
        blob = root / r["blob"]
        if not blob.exists():
            raise FileNotFoundError(f"missing frame blob for video {r['id']}: {blob}")
        common = dict(id=r["id"], blob=blob, fps=float(r["fps"]), n_frames=int(r["n_frames"]),
                      y=int(r["y"]), anomaly_type=r["anomaly_type"])
        if split == "train":
            out.append(TrainRecord(**common))
        else:
            labels = np.frombuffer(r["frame_labels"].encode(), dtype=np.uint8) - ord("0")
            out.append(TestRecord(**common, frame_labels=labels.astype(np.int8)))
    return out


def pretrain_root(root: str | Path) -> Path:
    """Directory holding the supervised corpus and its videos."""
    root = Path(root)
    return root / PRETRAIN_DIR if (root / PRETRAIN_DIR / "sft.jsonl").exists() else root


def load_sft_corpus(root: str | Path) -> list[dict]:
    path = pretrain_root(root) / "sft.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"supervised corpus not found: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Separability probe
# ---------------------------------------------------------------------------


def frame_features(frames: np.ndarray) -> np.ndarray:
    """Per-frame mean-pixel-difference features and their deviation from the
    video's median level."""
    f = frames.astype(np.float64).reshape(frames.shape[0], -1)
    prev = np.vstack([f[:1], f[:-1]])
    d_prev = np.abs(f - prev).mean(1)
    d_med = np.abs(f - np.median(f, axis=0)).mean(1)
    level = f.mean(1)
    raw = np.stack([d_prev, d_med, level], axis=1)
    dev = np.abs(raw - np.median(raw, axis=0))
    return np.hstack([raw, dev])


def separability_probe(root: str | Path, train_fraction: float = 0.8) -> float | None:
    """Frame-level test AUC of a logistic probe trained on train-split frames."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import roc_auc_score
    from sklearn.preprocessing import StandardScaler

    recs = read_manifest(root)
    train_ids, test_ids = split_ids([r["id"] for r in recs], train_fraction)
    by_id = {r["id"]: r for r in recs}

    def stack(ids):
        X, y = [], []
        for i in ids:
            r = by_id[i]
            X.append(frame_features(read_blob(Path(root) / r["blob"], i)))
            y.append(np.frombuffer(r["frame_labels"].encode(), dtype=np.uint8) - ord("0"))
        return np.vstack(X), np.concatenate(y)

    Xtr, ytr = stack(train_ids)
    Xte, yte = stack(test_ids)
    if len(set(ytr)) < 2 or len(set(yte)) < 2:
        return None
    scaler = StandardScaler().fit(Xtr)
    clf = LogisticRegression(max_iter=2000).fit(scaler.transform(Xtr), ytr)
    return float(roc_auc_score(yte, clf.predict_proba(scaler.transform(Xte))[:, 1]))
