"""WSPK tensor container.

Layout (all integers little-endian)::

    b"WSPK"  u32 version  u32 count
    count x [u16 name_len, name utf-8, u8 dtype_len, dtype str, u8 ndim, ndim x u64 dim, payload]

Payloads are little-endian IEEE-754 (or plain integers) in C order.  Entry
order is preserved, so ``dumps(loads(b)) == b`` for any valid blob.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"WSPK"
VERSION = 1
META_KEY = "__meta__"
_ALLOWED = {"<f4", "<f8", "<i4", "<i8", "|u1"}


class CheckpointError(ValueError):
    pass


def _le_dtype(a: np.ndarray) -> np.dtype:
    dt = a.dtype if a.dtype.itemsize == 1 else a.dtype.newbyteorder("<")
    if dt.str not in _ALLOWED:
        raise CheckpointError(f"unsupported dtype {a.dtype}")
    return dt


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    items = dict(tensors)
    if meta is not None:
        if META_KEY in items:
            raise CheckpointError(f"tensor name {META_KEY!r} is reserved")
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        items[META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    out = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items.items():
        arr = np.asarray(arr)
        dt = _le_dtype(arr)
        bname, bdt = name.encode(), dt.str.encode()
        if len(bname) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(bname)) + bname + struct.pack("<B", len(bdt)) + bdt)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict | None]:
    """Parse a blob into (tensors in file order, metadata or None)."""
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a WSPK checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (dlen,) = struct.unpack("<B", take(1))
        dstr = bytes(take(dlen)).decode()
        if dstr not in _ALLOWED:
            raise CheckpointError(f"{name}: unsupported dtype {dstr!r}")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = np.dtype(dstr)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    meta = None
    if META_KEY in tensors:
        meta = json.loads(tensors.pop(META_KEY).tobytes().decode())
    return tensors, meta


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    atomic_write_bytes(path, dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict | None]:
    return loads(Path(path).read_bytes())
