"""Binary parameter checkpoints.

Byte layout, all integers little-endian::

    magic        8 bytes   b"NSTCKPT1"
    meta_len     uint32    length of the metadata blob
    meta         meta_len  UTF-8 JSON object (model config, free-form extras)
    count        uint32    number of arrays
    count times:
      name_len   uint16
      name       name_len bytes, UTF-8
      ndim       uint8
      dims       ndim x uint32
      data       prod(dims) x float64, row-major

Arrays are written in sorted name order, so equal states give equal files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"NSTCKPT1"


def encode(state: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(meta_blob)), meta_blob, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")  # keeps 0-d shapes, unlike ascontiguousarray
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise InputError(f"checkpoint truncated at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"corrupt checkpoint metadata: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(view):
        raise InputError(f"{len(view) - pos} trailing bytes after checkpoint data")
    return state, meta


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(state, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(blob)


def save_model(path, model, extra: dict | None = None) -> None:
    meta = {"model": model.config.to_dict()}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path):
    from .model import Model, ModelConfig

    state, meta = load_checkpoint(path)
    if "model" not in meta:
        raise InputError(f"checkpoint {path} carries no model config")
    model = Model(ModelConfig.from_dict(meta["model"]), seed=0)
    model.load_state_dict(state)
    return model, meta
