"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"GVA1"  u32 version  u32 tensor_count
    per tensor: u16 name_len, UTF-8 name, u8 rank, rank x u32 dims,
                float32 payload (row-major)
    u32 json_len, UTF-8 JSON {"config": ..., "rng": ..., "meta": ...}
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

MAGIC = b"GVA1"
VERSION = 1
RESERVED = ("gmm.weights", "gmm.means", "gmm.vars")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config: str = ""
    rng: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write atomically (temp file then rename)."""
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 255:
            raise CheckpointError(f"tensor {name!r} cannot be stored")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    blob = json.dumps({"config": ckpt.config, "rng": ckpt.rng, "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    (jlen,) = r.unpack("<I")
    info = json.loads(r.take(jlen).decode("utf-8"))
    return Checkpoint(tensors, info.get("config", ""), info.get("rng", {}), info.get("meta", {}), version)
