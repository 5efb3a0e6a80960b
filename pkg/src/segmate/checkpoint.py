"""SMCK: little-endian container of named f32 tensors plus a JSON manifest.

Layout::

    "SMCK"                         4 bytes
    version        u32             currently 1
    meta_len       u32
    meta           meta_len bytes  UTF-8 JSON (model config and run info)
    count          u32
    count × tensor:
        name_len   u16
        name       name_len bytes  UTF-8
        ndim       u8
        dims       ndim × u32
        payload    prod(dims) × f32
    sha256         32 bytes        digest of everything before it
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"SMCK"
VERSION = 1
DIGEST = 32


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    meta: dict = field(default_factory=dict)


def encode(tensors, meta: dict | None = None) -> bytes:
    meta_b = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        if len(nb) > 0xFFFF or a.ndim > 255:
            raise CheckpointError(f"tensor {name!r} cannot be stored")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.off, self.end = buf, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > self.end:
            raise CheckpointError(f"truncated {what}: need {n} bytes, {self.end - self.off} remain", self.off)
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode(buf: bytes) -> Checkpoint:
    buf = bytes(buf)
    if len(buf) < len(MAGIC) + DIGEST:
        raise CheckpointError(f"file of {len(buf)} bytes is too short", len(buf))
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}", 0)
    end = len(buf) - DIGEST
    if hashlib.sha256(buf[:end]).digest() != buf[end:]:
        raise CheckpointError("checksum mismatch", end)
    r = _Reader(buf, end)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    (meta_len,) = r.unpack("<I", "meta length")
    at = r.off
    try:
        meta = json.loads(r.take(meta_len, "meta").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"meta is not valid JSON: {exc}", at) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        at = r.off
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not UTF-8", at) from None
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}", at)
        (ndim,) = r.unpack("<B", "ndim")
        dims = r.unpack(f"<{ndim}I", "dims")
        n = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    if r.off != end:
        raise CheckpointError(f"{end - r.off} trailing bytes before checksum", r.off)
    return Checkpoint(tensors, meta)


def save(path: str | os.PathLike, tensors, meta: dict | None = None) -> None:
    data = encode(tensors, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_model(path, net, meta: dict | None = None) -> None:
    info = {"model": net.config.to_dict()}
    info.update(meta or {})
    save(path, net.state_dict(), info)


def load_model(path, seed: int = 0):
    """Rebuild the network recorded in a checkpoint and load its tensors."""
    from .model import SegMateConfig, build

    ck = load(path)
    if "model" not in ck.meta:
        raise CheckpointError("checkpoint meta has no model config")
    net = build(SegMateConfig.from_dict(ck.meta["model"]), seed)
    net.load_state_dict(ck.tensors)
    return net, ck.meta
