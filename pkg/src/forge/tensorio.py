"""Bit-exact tensor serialization (the "FGTS" container).

Layout, all integers little-endian:

    magic "FGTS" | u8 format-version = 1 | u32 tensor-count
    per tensor: u16 name-length | UTF-8 name | u8 dtype (0 = f32) | u8 rank
                | rank x u32 dims | row-major little-endian f32 payload

Tensors are written in sorted-name order so identical contents always
produce identical bytes (version ids are derived from these bytes).
"""

from __future__ import annotations

import struct

import numpy as np

from forge.errors import CorruptStore, InvalidArgument

MAGIC = b"FGTS"
FORMAT_VERSION = 1
DTYPE_F32 = 0


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<BI", FORMAT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d to 1-d
        if arr.dtype != np.float32:
            raise InvalidArgument(f"tensor {name!r} must be float32, got {arr.dtype}")
        if arr.ndim > 255:
            raise InvalidArgument("tensor rank exceeds 255")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CorruptStore("bad tensor container magic")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != FORMAT_VERSION:
        raise CorruptStore(f"unsupported tensor container version {version}")
    off = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        dtype, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        if dtype != DTYPE_F32:
            raise CorruptStore(f"unknown tensor dtype {dtype}")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = buf[off:off + 4 * n]
        if len(payload) != 4 * n:
            raise CorruptStore("truncated tensor payload")
        off += 4 * n
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out
