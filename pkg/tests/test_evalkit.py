import json
import math

import numpy as np
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score, silhouette_score

from copra.evalkit import EvalReport, average_precision, project_2d, roc_auc, silhouette_2d


def auc_oracle(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins2 = sum(2 * int(p > n) + int(p == n) for p in pos for n in neg)
    return wins2 / (2 * len(pos) * len(neg))


def ap_oracle(s, y):
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    hits, total, count = 0, 0.0, 0
    for k, i in enumerate(order, 1):
        if y[i]:
            hits += 1
            total += hits / k
            count += 1
    return total / count


def instances(n_cases=200, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_cases):
        n = int(rng.integers(2, 201))
        # coarse grid so ties are frequent
        s = rng.integers(0, int(rng.integers(2, 30)), size=n) / 10.0
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        yield s, y


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert roc_auc([4, 3, 2, 1], [0, 0, 1, 1]) == 0.0
    assert math.isnan(roc_auc([0.1, 0.2], [1, 1]))


def test_ap_examples():
    assert average_precision([0.8, 0.4, 0.35, 0.1], [1, 0, 1, 0]) == pytest.approx(0.8333, abs=1e-4)
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == 0.25
    assert math.isnan(average_precision([0.1, 0.2], [0, 0]))


def test_metrics_match_brute_force_exactly():
    for s, y in instances():
        assert roc_auc(s, y) == auc_oracle(s, y)
        assert average_precision(s, y) == ap_oracle(s, y)


def test_metrics_agree_with_sklearn_without_ties():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = rng.random(150)
        y = rng.integers(0, 2, 150)
        assert roc_auc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
        assert average_precision(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


def test_monotone_transform_invariance():
    for s, y in list(instances(30, 1)):
        t = np.exp(3 * s) - 7
        assert roc_auc(t, y) == roc_auc(s, y)
        assert average_precision(t, y) == average_precision(s, y)


def test_silhouette_examples():
    pts = [(0, 0), (0, 1), (10, 0), (10, 1)]
    assert silhouette_2d(pts, [0, 0, 1, 1]) == pytest.approx(0.9002, abs=1e-4)
    assert silhouette_2d([(0, 0), (0, 0), (1, 1), (1, 1)], [0, 1, 0, 1]) <= 0
    assert math.isnan(silhouette_2d(pts, [0, 0, 0, 0]))
    # the singleton point scores 0; the pair scores (b - a) / b with a = 1
    expect = (0 + (5 - 1) / 5 + (math.sqrt(26) - 1) / math.sqrt(26)) / 3
    assert silhouette_2d([(0, 0), (5, 0), (5, 1)], [0, 1, 1]) == pytest.approx(expect, abs=1e-12)


def test_silhouette_matches_sklearn_and_is_similarity_invariant():
    rng = np.random.default_rng(4)
    X = np.vstack([rng.normal(0, 1, (15, 2)), rng.normal(3, 1, (20, 2))])
    lab = np.r_[np.zeros(15), np.ones(20)]
    base = silhouette_2d(X, lab)
    assert base == pytest.approx(silhouette_score(X, lab), abs=1e-12)
    th = 0.7
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    assert silhouette_2d(2.5 * X @ R.T + [4, -9], lab) == pytest.approx(base, abs=1e-9)


def test_projection_is_rotation_of_centered_2d_points():
    rng = np.random.default_rng(5)
    P = rng.normal(size=(30, 2))
    P -= P.mean(0)
    Q = project_2d(P)
    dist = lambda A: np.sqrt(((A[:, None] - A[None]) ** 2).sum(-1))
    assert np.allclose(dist(P), dist(Q), atol=1e-6)


def test_projection_duplicates_and_rank_deficiency():
    rng = np.random.default_rng(6)
    E = rng.normal(size=(12, 9))
    assert np.allclose(project_2d(np.vstack([E, E]))[:12], project_2d(E), atol=1e-9)
    line = np.outer(np.arange(5.0), rng.normal(size=4))
    out = project_2d(line)
    assert np.all(out[:, 1] == 0) and np.ptp(out[:, 0]) > 0
    with pytest.raises(ValueError):
        project_2d(E[:2])


def test_projection_sign_convention():
    rng = np.random.default_rng(7)
    E = rng.normal(size=(10, 6))
    assert np.allclose(project_2d(E), project_2d(E * 1.0))
    # flipping the data flips nothing in the convention's outcome
    a, b = project_2d(E), project_2d(-E)
    assert np.allclose(np.abs(a), np.abs(b))


def test_report_rows_and_json():
    tracks = {"a": {st: np.array([0.1, 0.9, 0.2]) for st in ("s1", "s2", "s3")},
              "b": {st: np.array([0.3, 0.3]) for st in ("s1", "s2", "s3")}}
    labels = {"a": np.array([0, 1, 0]), "b": np.array([0, 0])}
    rep = EvalReport.from_tracks(tracks, labels, {"granularity": "chunk120s"})
    text = rep.to_text()
    assert [l.split("\t")[0] for l in text.splitlines() if not l.startswith("#")] == ["stage", "s1", "s2", "s3"]
    assert rep.auc["s1"] == 1.0
    doc = json.loads(rep.to_json())
    assert doc["auc"]["s3"] == 1.0 and doc["meta"]["granularity"] == "chunk120s"
    und = EvalReport.from_tracks({"b": tracks["b"]}, {"b": labels["b"]})
    assert "undefined" in und.to_text() and json.loads(und.to_json())["auc"]["s1"] is None
