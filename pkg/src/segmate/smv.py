"""SMV: little-endian container for HU volumes and label masks.

Layout::

    "SMV1"                      4 bytes
    kind          u8            0 = HU volume, 1 = mask
    reserved      u8            must be 0
    num_classes   u16           masks only, 0 otherwise
    Z, H, W       3 × u32
    spacing       3 × f32       (sz, sy, sx) mm
    id_len        u32
    patient_id    id_len bytes  UTF-8
    payload       Z·H·W × i16 (HU) or u8 (mask)
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DataError, FormatError
from .volume import MaskVolume, Volume

MAGIC = b"SMV1"
KIND_HU = 0
KIND_MASK = 1
_HEADER = struct.Struct("<4sBBH3I3fI")
MAX_ID_BYTES = 1 << 16


def encode(obj: Volume | MaskVolume) -> bytes:
    pid = obj.patient_id.encode("utf-8")
    if isinstance(obj, MaskVolume):
        kind, k, payload = KIND_MASK, obj.num_classes, obj.labels.astype("<u1").tobytes()
    elif isinstance(obj, Volume):
        kind, k, payload = KIND_HU, 0, obj.voxels.astype("<i2").tobytes()
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")
    z, h, w = obj.shape
    header = _HEADER.pack(MAGIC, kind, 0, k, z, h, w, *obj.spacing, len(pid))
    return header + pid + payload


def decode(buf: bytes) -> Volume | MaskVolume:
    if len(buf) < _HEADER.size:
        raise FormatError(f"header needs {_HEADER.size} bytes, file has {len(buf)}", len(buf))
    magic, kind, reserved, k, z, h, w, sz, sy, sx, id_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if kind not in (KIND_HU, KIND_MASK):
        raise FormatError(f"unknown kind {kind}", 4)
    if reserved != 0:
        raise FormatError(f"reserved byte is {reserved}, expected 0", 5)
    if kind == KIND_MASK and k == 0:
        raise FormatError("mask declares zero classes", 6)
    if kind == KIND_HU and k != 0:
        raise FormatError(f"HU volume declares {k} classes", 6)
    if kind == KIND_MASK and k > 256:
        raise FormatError(f"u8 mask cannot hold {k} classes", 6)
    if min(z, h, w) == 0:
        raise FormatError(f"empty grid {z}x{h}x{w}", 8)
    spacing = (sz, sy, sx)
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"spacing must be positive and finite, got {spacing}", 20)
    if id_len > MAX_ID_BYTES:
        raise FormatError(f"patient id length {id_len} exceeds {MAX_ID_BYTES}", 32)
    off = _HEADER.size
    if len(buf) < off + id_len:
        raise FormatError(f"truncated patient id: need {id_len} bytes, have {len(buf) - off}", len(buf))
    try:
        pid = bytes(buf[off : off + id_len]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"patient id is not UTF-8: {exc.reason}", off + exc.start) from None
    off += id_len
    itemsize = 2 if kind == KIND_HU else 1
    need = z * h * w * itemsize
    have = len(buf) - off
    if have < need:
        raise FormatError(f"truncated payload: header claims {need} bytes, {have} remain", len(buf))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", off + need)
    dtype = "<i2" if kind == KIND_HU else "<u1"
    data = np.frombuffer(buf, dtype=dtype, count=z * h * w, offset=off).reshape(z, h, w)
    if kind == KIND_HU:
        return Volume(data.astype(np.int16), spacing, pid)
    top = int(data.max())
    if top >= k:
        bad = int(np.argmax(data.reshape(-1) >= k))
        raise FormatError(f"label {top} not below num_classes {k}", off + bad)
    try:
        return MaskVolume(data.astype(np.uint8), k, spacing, pid)
    except DataError as exc:
        raise FormatError(str(exc), off) from None


def write_smv(path: str | os.PathLike, obj: Volume | MaskVolume) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(obj))


def read_smv(path: str | os.PathLike) -> Volume | MaskVolume:
    with open(path, "rb") as fh:
        return decode(fh.read())
