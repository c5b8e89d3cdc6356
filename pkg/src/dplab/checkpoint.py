"""Versioned parameter checkpoints with a JSON metadata sidecar.

Binary layout: 4-byte magic ``DPCK``, little-endian uint32 version,
little-endian uint64 value count, then the parameter values as
little-endian float64 in ParamSet iteration order. The sidecar (same path
plus ``.json``) records the parameter manifest (names and shapes) needed
to rebuild the ParamSet, plus caller-supplied metadata such as
architecture hyperparameters and accountant state.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nets import ParamSet

MAGIC = b"DPCK"
VERSION = 1


class CheckpointError(ValueError):
    """Structured failure while reading a checkpoint."""


def save_checkpoint(path: str | Path, params: ParamSet, meta: dict) -> None:
    path = Path(path)
    flat = params.flat()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.astype("<f8").tobytes())
    manifest = [{"name": n, "shape": list(v.shape)} for n, v in params.items()]
    sidecar = {"version": VERSION, "params": manifest, "meta": meta}
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict]:
    path = Path(path)
    side = path.with_suffix(path.suffix + ".json")
    if not side.exists():
        raise CheckpointError(f"{side}: sidecar missing")
    with open(side) as f:
        sidecar = json.load(f)
    if sidecar.get("version") != VERSION:
        raise CheckpointError(f"{side}: unsupported version {sidecar.get('version')}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: wrong magic {magic!r}, expected {MAGIC!r}")
        version = struct.unpack("<I", f.read(4))[0]
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        count = struct.unpack("<Q", f.read(8))[0]
        buf = f.read(8 * count)
        if len(buf) != 8 * count:
            raise CheckpointError(
                f"{path}: truncated: expected {8 * count} payload bytes, got {len(buf)}"
            )
    flat = np.frombuffer(buf, dtype="<f8").astype(np.float64)
    expected = sum(int(np.prod(p["shape"])) for p in sidecar["params"])
    if expected != count:
        raise CheckpointError(
            f"{path}: sidecar declares {expected} values, file holds {count}"
        )
    ps = ParamSet()
    pos = 0
    for p in sidecar["params"]:
        shape = tuple(int(s) for s in p["shape"])
        size = int(np.prod(shape)) if shape else 1
        ps.add(p["name"], flat[pos : pos + size].reshape(shape))
        pos += size
    return ps, sidecar["meta"]
