"""Byte-stable named-tensor checkpoints.

Layout: magic line, a JSON header describing the tensors in name order,
a newline, then the raw little-endian float64 buffers concatenated in
header order. Identical tensor contents always serialize to identical
bytes.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"fragbench-ckpt 1\n"


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str, tensors: dict):
    arrays = {}
    for name, t in tensors.items():
        # np.array (not ascontiguousarray) keeps 0-d shapes intact
        arrays[name] = np.array(getattr(t, "data", t), dtype=np.float64, order="C")
    header = {
        "tensors": [
            {"name": name, "shape": list(arrays[name].shape)} for name in sorted(arrays)
        ]
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(blob)
        for name in sorted(arrays):
            fh.write(arrays[name].astype("<f8").tobytes())


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path!r}")
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from e
        out = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"truncated checkpoint {path!r} at {entry['name']}")
            out[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"trailing bytes in checkpoint {path!r}")
    return out
