"""MMCK checkpoint files.

Layout: ``b"MMCK"``, one version byte, an 8-byte little-endian header
length, a UTF-8 JSON header, then the raw little-endian float32 buffers of
every tensor listed in the header, concatenated in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .nets import SegModel, UNetConfig, build_model

MAGIC = b"MMCK"
VERSION = 1
_PREFIX = len(MAGIC) + 1 + 8


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs = [], []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "dtype": "f32"})
        blobs.append(a.tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_tensors(path) -> Tuple[Dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an MMCK checkpoint (bad magic)")
    if raw[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {raw[4]}")
    (hlen,) = struct.unpack("<Q", raw[5:13])
    if _PREFIX + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header ({hlen} bytes declared)")
    try:
        header = json.loads(raw[_PREFIX:_PREFIX + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    offset = _PREFIX + hlen
    out = {}
    for entry in header.get("tensors", []):
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{path}: tensor {entry.get('name')} has unsupported dtype {entry.get('dtype')}")
        shape = tuple(int(d) for d in entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for tensor {entry['name']}")
        out[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")
    return out, header.get("meta", {})


def save_model(path, model: SegModel, extra: dict | None = None) -> None:
    meta = {"task_id": model.task_id, "unet": model.cfg.to_dict()}
    if extra:
        meta.update(extra)
    save_tensors(path, model.state_dict(), meta)


def load_model(path) -> SegModel:
    tensors, meta = load_tensors(path)
    try:
        cfg = UNetConfig(**meta["unet"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: header lacks a valid 'unet' config") from exc
    model = build_model(cfg, meta.get("task_id", ""), np.random.default_rng(0))
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model
