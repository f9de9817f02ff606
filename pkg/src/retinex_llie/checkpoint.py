"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BLNT" | u32 version | u32 tensor_count
    per tensor: u32 name_len | name (utf-8) | u8 dtype | u32 rank | u32 dims[rank] | payload

Tensor names are ``<group>.<param name>``. Run metadata travels as a
uint8 tensor named ``__meta__`` holding UTF-8 JSON.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"BLNT"
VERSION = 1
META_NAME = "__meta__"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_TAGS = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t, order="C")


def encode(tensors: "dict[str, np.ndarray]") -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = _to_numpy(arr)
        tag = _TAGS.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)) + raw_name)
        out.append(struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype(_DTYPES[tag], copy=False).tobytes())
    return b"".join(out)


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return tensors


def save_checkpoint(path, groups: "dict[str, dict]", meta: dict | None = None) -> None:
    """Write parameter groups (e.g. ``{"decom": params, "ncbc": params}``)."""
    tensors = OrderedDict()
    for group, params in groups.items():
        for name, t in params.items():
            tensors[f"{group}.{name}"] = _to_numpy(t)
    if meta is not None:
        tensors[META_NAME] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    Path(path).write_bytes(encode(tensors))


def load_checkpoint(path) -> tuple["dict[str, OrderedDict]", dict]:
    """Read a checkpoint back into ``(groups, meta)``; tensors come back as torch."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    groups: dict[str, OrderedDict] = {}
    meta: dict = {}
    for name, arr in decode(buf).items():
        if name == META_NAME:
            meta = json.loads(arr.tobytes().decode("utf-8"))
            continue
        group, _, pname = name.partition(".")
        groups.setdefault(group, OrderedDict())[pname] = torch.from_numpy(arr)
    return groups, meta


def params_digest(params) -> str:
    """SHA-256 over names, shapes and raw bytes of a parameter map."""
    h = hashlib.sha256()
    for name, t in params.items():
        arr = _to_numpy(t)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
