"""Deterministic binary container: one JSON header line, then raw array bytes.

Used for model checkpoints, hierarchy caches, and contribution tables. The
byte stream is a pure function of the content, so equal inputs produce equal
files (required for checksum-based reproducibility checks).
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = "apexblob1"


def save_blob(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    header = {
        "magic": MAGIC,
        "meta": meta,
        "arrays": [
            {"name": k, "dtype": str(v.dtype), "shape": list(v.shape)}
            for k, v in arrays.items()
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v).tobytes())


def load_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("magic") != MAGIC:
            raise ValueError(f"{path}: not an apexblob1 file")
        arrays = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * dtype.itemsize)
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return header["meta"], arrays
