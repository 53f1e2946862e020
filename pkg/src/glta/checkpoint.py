"""Versioned binary checkpoint of named float32 arrays.

Layout (all integers little-endian)::

    b"GLTA"  u32 version
    u32 n, stage tag (utf-8, n bytes)
    u32 n, header JSON (utf-8, n bytes): {"config": ..., "meta": ...}
    u32 array count, then per array:
        u16 n, name (utf-8)   u8 ndim   u32 dims[ndim]   float32 payload
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GLTA"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class StageError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    stage: str
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.stage == other.stage and self.config == other.config and self.meta == other.meta
                and list(self.arrays) == list(other.arrays)
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))


def _pack_str(s: str, width: str = "<I") -> bytes:
    b = s.encode("utf-8")
    return struct.pack(width, len(b)) + b


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(ckpt.stage)]
    header = json.dumps({"config": ckpt.config, "meta": ckpt.meta}, sort_keys=True)
    parts.append(_pack_str(header))
    parts.append(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            if not np.issubdtype(a.dtype, np.floating) and not np.issubdtype(a.dtype, np.integer):
                raise CheckpointError(f"array {name!r} has unsupported dtype {a.dtype}")
            a = a.astype(np.float32)
        if a.ndim > 255:
            raise CheckpointError(f"array {name!r} has too many dimensions")
        parts.append(_pack_str(name, "<H"))
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = "<I") -> str:
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a GLTA checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stage = r.string()
    header = json.loads(r.string())
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        name = r.string("<H")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after checkpoint arrays")
    return Checkpoint(stage, arrays, header.get("config", {}), header.get("meta", {}))


def save_checkpoint(path, ckpt: Checkpoint, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force=True (--force) to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_stage=None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise StageError(f"checkpoint {path} not found")
    ckpt = decode(path.read_bytes())
    if expected_stage is not None:
        allowed = (expected_stage,) if isinstance(expected_stage, str) else tuple(expected_stage)
        if ckpt.stage not in allowed:
            raise StageError(f"{path} holds stage {ckpt.stage!r}, expected one of {allowed}")
    return ckpt


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def array_digest(arrays: Mapping[str, np.ndarray], names) -> str:
    h = hashlib.sha256()
    for n in names:
        h.update(n.encode())
        h.update(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())
    return h.hexdigest()
