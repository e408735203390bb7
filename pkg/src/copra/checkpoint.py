"""Versioned tensor checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"COPRACKP"
    version    uint32
    hlen       uint32   length of the JSON header in bytes
    header     hlen bytes UTF-8 JSON: {"config_digest", "seed", "kind", "meta",
               "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload    raw little-endian tensor bytes at the recorded offsets

Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .numeric import ContractViolation

MAGIC = b"COPRACKP"
VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
    torch.uint8: "|u1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class DigestMismatch(ContractViolation):
    pass


@dataclass
class Checkpoint:
    kind: str
    config_digest: str
    seed: int
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, kind: str, tensors: Mapping[str, torch.Tensor], config_digest: str,
                    seed: int, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ContractViolation(f"unsupported dtype {t.dtype} for tensor {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append(dict(name=name, dtype=_DTYPES[t.dtype], shape=list(t.shape), offset=offset, nbytes=len(raw)))
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(dict(kind=kind, config_digest=config_digest, seed=int(seed), meta=meta or {},
                             tensors=index), sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".partial")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expect_kind: str | None = None,
                    expect_digest: str | None = None) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ContractViolation(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    if expect_kind is not None and header["kind"] != expect_kind:
        raise ContractViolation(f"{path}: expected a {expect_kind} checkpoint, found {header['kind']}")
    if expect_digest is not None and header["config_digest"] != expect_digest:
        raise DigestMismatch(
            f"{path} was produced under config digest {header['config_digest'][:12]}, "
            f"but the current config resolves to {expect_digest[:12]}; refusing to mix runs")
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(_TORCH[e["dtype"]])
    return Checkpoint(header["kind"], header["config_digest"], header["seed"], tensors, header["meta"])
