"""Frame-level ranking metrics and embedding diagnostics.

Undefined cases (single-class labels, no positives, fewer than two clusters)
return ``nan`` rather than raising, so reports can carry them as explicit
"undefined" rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

UNDEFINED = float("nan")


def roc_auc(scores, labels) -> float:
    """Rank-based AUC with ties counted as half a win.

    Computed from integer win counts (twice the Mann-Whitney U), so the result
    is the exact fraction of (positive, negative) pairs ranked correctly.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    # doubled average ranks are integers even with ties
    r2 = (2 * rankdata(s, method="average")).astype(np.int64)
    u2 = int(r2[y].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """Mean precision at each positive, descending score, ties by index."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not y.any():
        return UNDEFINED
    order = np.lexsort((np.arange(len(s)), -s))
    hits = y[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(s) + 1)
    prec = tp[hits] / ranks[hits]
    return float(np.cumsum(prec)[-1] / len(prec))


def silhouette_2d(points, labels) -> float:
    """Mean silhouette ``(b - a) / max(a, b)``; a singleton cluster scores 0."""
    X = np.asarray(points, dtype=np.float64)
    lab = np.asarray(labels).ravel()
    classes = np.unique(lab)
    if len(classes) < 2:
        return UNDEFINED
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    s = np.zeros(len(X))
    for i in range(len(X)):
        same = lab == lab[i]
        n_same = int(same.sum()) - 1
        if n_same == 0:
            continue
        a = D[i, same].sum() / n_same
        b = min(D[i, lab == c].mean() for c in classes if c != lab[i])
        m = max(a, b)
        s[i] = 0.0 if m == 0 else (b - a) / m
    return float(s.mean())


def project_2d(embeddings) -> np.ndarray:
    """Top-2 principal directions of the centred embeddings, each signed so
    its largest-magnitude coordinate is positive. Rank-deficient inputs get a
    zero second axis."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 3:
        raise ValueError("project_2d needs at least 3 embeddings")
    C = E - E.mean(0)
    _, sv, vt = np.linalg.svd(C, full_matrices=False)
    tol = sv[0] * max(C.shape) * np.finfo(float).eps if sv.size and sv[0] > 0 else 0.0
    out = np.zeros((E.shape[0], 2))
    for k in range(min(2, vt.shape[0])):
        if sv[k] <= tol:
            continue
        v = vt[k]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, k] = C @ v
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

STAGES = ("s1", "s2", "s3")


def _fmt(x: float) -> str:
    return "undefined" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


@dataclass
class EvalReport:
    auc: dict[str, float]
    ap: dict[str, float]
    meta: dict = field(default_factory=dict)
    per_video: dict[str, dict[str, float]] = field(default_factory=dict)
    silhouette: float | None = None

    @classmethod
    def from_tracks(cls, tracks: dict[str, dict[str, np.ndarray]], labels: dict[str, np.ndarray],
                    meta: dict | None = None) -> "EvalReport":
        """``tracks[video][stage]`` are frame scores; ``labels[video]`` frame labels."""
        vids = sorted(tracks)
        y = np.concatenate([labels[v] for v in vids]) if vids else np.zeros(0)
        auc, ap, per = {}, {}, {}
        for st in STAGES:
            s = np.concatenate([tracks[v][st] for v in vids]) if vids else np.zeros(0)
            auc[st] = roc_auc(s, y)
            ap[st] = average_precision(s, y)
        for v in vids:
            per[v] = {st: float(np.mean(tracks[v][st])) for st in STAGES}
        return cls(auc, ap, dict(meta or {}), per)

    def to_text(self) -> str:
        lines = ["# evaluation report"]
        for k in sorted(self.meta):
            lines.append(f"# {k}: {self.meta[k]}")
        lines.append("stage\tauc\tap")
        for st in STAGES:
            lines.append(f"{st}\t{_fmt(self.auc.get(st))}\t{_fmt(self.ap.get(st))}")
        if self.silhouette is not None:
            lines.append(f"silhouette\t{_fmt(self.silhouette)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(dict(
            auc={k: _num(v) for k, v in self.auc.items()},
            ap={k: _num(v) for k, v in self.ap.items()},
            silhouette=_num(self.silhouette), meta=self.meta, per_video=self.per_video,
        ), indent=2, sort_keys=True)
