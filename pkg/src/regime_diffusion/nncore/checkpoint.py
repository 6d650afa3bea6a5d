"""Checkpoint files: one JSON header line, then a little-endian float64 blob.

The header lists every parameter's name and shape in blob order, next to
whatever metadata the caller supplies (architecture, normalizer, seed, ...).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "regime-diffusion-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict) -> None:
    header = {
        "format": MAGIC,
        "version": VERSION,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "meta": meta,
    }
    line = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    Path(path).write_bytes(line + b"\n" + blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise CheckpointError(f"{path}: missing header line")
    header = json.loads(raw[:cut].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    blob = np.frombuffer(raw[cut + 1 :], dtype="<f8")
    params, offset = {}, 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        if offset + n > blob.size:
            raise CheckpointError(f"{path}: parameter blob truncated at {entry['name']}")
        params[entry["name"]] = blob[offset : offset + n].reshape(shape).astype(np.float64)
        offset += n
    if offset != blob.size:
        raise CheckpointError(f"{path}: {blob.size - offset} trailing values in parameter blob")
    return params, header["meta"]
