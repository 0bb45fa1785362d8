"""
SLAT 바이너리 포맷

    magic "NEARSLAT", version u32, N u32, K u32, D u32, basecolor flag u8
    [D_bc u32]                      (flag == 1 일 때)
    coords u16 × 3K
    feats  f32 × K·D
    [basecolor feats f32 × K·D_bc]  (flag == 1 일 때)

정수와 float 는 모두 little-endian 입니다.
"""

import logging
import struct

import numpy as np

from near.core.errors import FormatError
from near.latent.slat import Slat

logger = logging.getLogger(__name__)

SLAT_MAGIC = b"NEARSLAT"
SLAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIB")


def serialize(slat: Slat) -> bytes:
    if slat.grid_resolution > 65535:
        raise FormatError("grid resolution does not fit u16 coordinates")
    has_bc = slat.basecolor_feats is not None
    parts = [
        _HEADER.pack(
            SLAT_MAGIC,
            SLAT_VERSION,
            slat.grid_resolution,
            slat.num_tokens,
            slat.feature_dim,
            1 if has_bc else 0,
        )
    ]
    if has_bc:
        parts.append(struct.pack("<I", slat.basecolor_dim))
    parts.append(np.ascontiguousarray(slat.coords, dtype="<u2").tobytes())
    parts.append(np.ascontiguousarray(slat.feats, dtype="<f4").tobytes())
    if has_bc:
        parts.append(np.ascontiguousarray(slat.basecolor_feats, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> Slat:
    """
    Raises:
        FormatError: magic/버전 불일치, 절단, 남는 바이트
        SlatError: 중복/범위 밖/정렬되지 않은 좌표
    """
    if len(blob) < _HEADER.size:
        raise FormatError("Truncated SLAT header")
    magic, version, n, k, d, flag = _HEADER.unpack_from(blob, 0)
    if magic != SLAT_MAGIC:
        raise FormatError("Not a SLAT file (bad magic)")
    if version != SLAT_VERSION:
        raise FormatError(f"Unsupported SLAT version {version}")
    if flag not in (0, 1):
        raise FormatError(f"Invalid basecolor flag {flag}")
    offset = _HEADER.size
    d_bc = 0
    if flag:
        if len(blob) < offset + 4:
            raise FormatError("Truncated SLAT header")
        (d_bc,) = struct.unpack_from("<I", blob, offset)
        offset += 4

    expected = offset + 6 * k + 4 * k * d + 4 * k * d_bc
    if len(blob) < expected:
        raise FormatError(f"Truncated SLAT payload: {len(blob)} < {expected} bytes")
    if len(blob) > expected:
        raise FormatError(f"Trailing bytes after SLAT payload ({len(blob) - expected})")

    coords = np.frombuffer(blob, dtype="<u2", count=3 * k, offset=offset).reshape(k, 3)
    offset += 6 * k
    feats = np.frombuffer(blob, dtype="<f4", count=k * d, offset=offset).reshape(k, d)
    offset += 4 * k * d
    bc = None
    if flag:
        bc = np.frombuffer(blob, dtype="<f4", count=k * d_bc, offset=offset).reshape(k, d_bc)
    return Slat(n, coords.astype(np.int64), feats.astype(np.float32), bc)


def save_slat(path: str, slat: Slat) -> None:
    with open(path, "wb") as f:
        f.write(serialize(slat))
    logger.debug(f"Wrote {slat} to {path}")


def load_slat(path: str) -> Slat:
    with open(path, "rb") as f:
        return deserialize(f.read())
