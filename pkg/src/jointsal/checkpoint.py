"""Versioned binary checkpoints.

Layout (all integers u32 little-endian)::

    b"SSTM" | version | meta_len | meta (UTF-8 JSON) | n_records |
    n_records * ( name_len | name (UTF-8) | ndim | dims[ndim] | float64 LE values )

Parameter records come first, in module order; optimizer buffers follow
under names prefixed with ``optim.``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, DecodeError, VersionError

MAGIC = b"SSTM"
VERSION = 1
_U32 = struct.Struct("<I")


def encode(meta: dict, records: dict) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta_bytes)), meta_bytes, _U32.pack(len(records))]
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts += [_U32.pack(len(nb)), nb, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DecodeError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode(buf: bytes) -> tuple[dict, dict]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise DecodeError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    meta = json.loads(r.take(r.u32()).decode())
    records = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        records[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise DecodeError("trailing bytes after the last checkpoint record")
    return meta, records


def save(path, model, meta: dict, optimizer=None) -> Path:
    """Write atomically (temp file + rename)."""
    records = {name: p.data for name, p in model.named_parameters()}
    meta = dict(meta)
    if optimizer is not None:
        records.update({f"optim.{k}": v for k, v in optimizer.buffers().items()})
        meta["optimizer"] = optimizer.scalars()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(meta, records))
    os.replace(tmp, path)
    return path


def read(path) -> tuple[dict, dict]:
    return decode(Path(path).read_bytes())


def load_into(model, records: dict, optimizer=None, meta: dict | None = None) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(records))
    extra = sorted(k for k in records if k not in params and not k.startswith("optim."))
    if missing or extra:
        raise ContractError(f"checkpoint does not match the model: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        arr = records[name]
        if arr.shape != p.shape:
            raise ContractError(f"{name}: checkpoint shape {arr.shape}, model shape {p.shape}")
        p.data[...] = arr
    if optimizer is not None and meta is not None and "optimizer" in meta:
        buffers = {k[len("optim.") :]: v for k, v in records.items() if k.startswith("optim.")}
        optimizer.load_state(meta["optimizer"], buffers)
