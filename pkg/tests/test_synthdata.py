import dataclasses
import json

import numpy as np
import pytest

from copra.grpo import format_reward
from copra import synthdata
from copra.numeric import ContractViolation
from copra.synthdata import (
    PRETRAIN_DIR, SynthConfig, TrainRecord, dataset_digest, generate_dataset, load_sft_corpus,
    load_split, read_blob, read_manifest, split_ids,
)


def small(**kw):
    base = dict(n_videos=40, min_frames=100, max_frames=160, pretrain_videos=10, seed=3)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    info = generate_dataset(small(), root)
    return root, info


def test_same_seed_same_digest(data, tmp_path):
    root, info = data
    again = generate_dataset(small(), tmp_path / "b")
    assert again["digest"] == info["digest"] == dataset_digest(root)
    assert again["pretrain"]["digest"] == info["pretrain"]["digest"]
    other = generate_dataset(small(seed=4, pretrain_videos=0), tmp_path / "c")
    assert other["digest"] != info["digest"]


def test_exact_stratification(tmp_path):
    info = generate_dataset(small(n_videos=200, min_frames=80, max_frames=90, pretrain_videos=0), tmp_path)
    assert info["n_abnormal"] == 100
    assert sum(r["y"] for r in read_manifest(tmp_path)) == 100


def test_windows_and_labels(data):
    root, _ = data
    cfg = small()
    types = set()
    for r in read_manifest(root):
        labels = np.array([int(c) for c in r["frame_labels"]])
        assert len(labels) == r["n_frames"]
        assert labels.max(initial=0) == r["y"]
        if r["y"]:
            lo, hi = r["anomaly_window"]
            assert 0 <= lo < hi <= r["n_frames"]
            assert cfg.window_min <= hi - lo <= cfg.window_max
            assert labels[lo:hi].all() and labels.sum() == hi - lo
            types.add(r["anomaly_type"])
        else:
            assert r["anomaly_type"] == "none" and r["anomaly_window"] is None
    assert types == set(cfg.anomaly_types)


def test_blob_layout(data):
    root, _ = data
    r = read_manifest(root)[0]
    raw = (root / r["blob"]).read_bytes()
    w, h, c, n = np.frombuffer(raw[:16], dtype="<u4")
    assert (w, h, c, n) == (32, 32, 1, r["n_frames"])
    frames = read_blob(root / r["blob"])
    assert frames.dtype == np.uint8 and frames.shape == (n, c, h, w)


def test_anomaly_is_visible_in_pixels(data):
    root, _ = data
    for r in read_manifest(root):
        if r["anomaly_type"] != "flash_event":
            continue
        f = read_blob(root / r["blob"]).astype(float).mean(axis=(1, 2, 3))
        lo, hi = r["anomaly_window"]
        assert f[lo:hi].mean() > f[np.r_[0:lo, hi:len(f)]].mean() + 30


def test_split_disjoint_and_stable(data):
    root, _ = data
    tr, te = load_split(root, "train"), load_split(root, "test")
    assert {r.id for r in tr}.isdisjoint({r.id for r in te})
    assert len(tr) + len(te) == 40 and len(tr) == 32
    assert [r.id for r in load_split(root, "train")] == [r.id for r in tr]
    assert split_ids(["a", "b", "c", "d", "e"], 0.8) == split_ids(["e", "d", "c", "b", "a"], 0.8)
    with pytest.raises(ContractViolation):
        load_split(root, "val")


def test_weak_supervision_firewall(data):
    root, _ = data
    assert "frame_labels" not in {f.name for f in dataclasses.fields(TrainRecord)}
    tr = load_split(root, "train")
    assert all(type(r) is TrainRecord for r in tr)
    assert not any(hasattr(r, "frame_labels") for r in tr)
    te = load_split(root, "test")
    assert all(isinstance(r, synthdata.TestRecord) and len(r.frame_labels) == r.n_frames for r in te)


def test_missing_blob_names_the_video(data, tmp_path):
    root, _ = data
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    victim = load_split(copy, "train")[0]
    victim.blob.unlink()
    with pytest.raises(FileNotFoundError, match=victim.id):
        load_split(copy, "train")


def test_sft_corpus(data):
    root, info = data
    corpus = load_sft_corpus(root)
    assert (root / PRETRAIN_DIR / "sft.jsonl").exists() and not (root / "sft.jsonl").exists()
    assert len(corpus) == 10 * (1 + small().sft_windows_per_video)
    assert all(format_reward(c["response"]) for c in corpus)
    assert all(len(c["indices"]) == 8 for c in corpus)
    # independent videos: no blob is shared with the benchmark
    bench = {(root / r["blob"]).read_bytes() for r in read_manifest(root)}
    pre = {(root / PRETRAIN_DIR / r["blob"]).read_bytes() for r in read_manifest(root / PRETRAIN_DIR)}
    assert bench.isdisjoint(pre)
    assert info["pretrain"]["n_videos"] == 10


def test_separability_probe_default_benchmark(tmp_path):
    info = generate_dataset(SynthConfig(n_videos=60, pretrain_videos=0, seed=0), tmp_path)
    assert info["probe_auc"] > 0.9
    saved = json.loads((tmp_path / "dataset_info.json").read_text())
    assert saved["probe_auc"] == info["probe_auc"]


def test_config_validation():
    with pytest.raises(ContractViolation):
        SynthConfig(abnormal_fraction=1.0)
    with pytest.raises(ContractViolation):
        SynthConfig(anomaly_types=("earthquake",))
    with pytest.raises(ContractViolation):
        SynthConfig(window_min=500)
    with pytest.raises(ContractViolation):
        SynthConfig(background_range=(100, 50))
    with pytest.raises(ContractViolation):
        SynthConfig(speed_range=(0, 4))


def test_short_videos_are_resampled(tmp_path):
    info = generate_dataset(small(min_frames=10, max_frames=60, window_min=40, window_max=50,
                                  pretrain_videos=0), tmp_path)
    assert info["resampled"] > 0
    for r in read_manifest(tmp_path):
        if r["y"]:
            assert r["n_frames"] >= 40
