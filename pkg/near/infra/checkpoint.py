"""
Tensor 체크포인트 포맷

    magic   "NEARCKPT" (8 bytes)
    version u32
    records (EOF 까지 반복):
        name_len u32, name utf-8
        rank u32, extents u64 × rank
        payload little-endian f32 × prod(extents)

모든 정수는 little-endian 입니다.
"""

import logging
import os
import struct
from typing import Dict

import numpy as np

from near.core.errors import FormatError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NEARCKPT"
CHECKPOINT_VERSION = 1


def encode_checkpoint(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, value in tensors.items():
        array = np.asarray(value)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", array.ndim))
        if array.ndim:
            parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    """
    Raises:
        FormatError: magic 불일치, 지원하지 않는 버전, 레코드 절단
    """
    if len(blob) < 12 or blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError("Not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}")

    tensors: Dict[str, np.ndarray] = {}
    offset = 12
    total = len(blob)
    while offset < total:
        try:
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            if offset + name_len > total:
                raise FormatError("Truncated checkpoint record name")
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
            offset += 8 * rank
        except struct.error as e:
            raise FormatError(f"Truncated checkpoint header: {e}") from e
        except UnicodeDecodeError as e:
            raise FormatError(f"Invalid record name encoding: {e}") from e

        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > total:
            raise FormatError(f"Truncated payload for '{name}'")
        payload = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[name] = payload.reshape(shape).astype(np.float32)
        offset += nbytes
    return tensors


def save_checkpoint(path: str, tensors: Dict[str, np.ndarray]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_checkpoint(tensors))
    logger.debug(f"Saved checkpoint {path} ({len(tensors)} tensors)")


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    tensors = decode_checkpoint(blob)
    logger.debug(f"Loaded checkpoint {path} ({len(tensors)} tensors)")
    return tensors


def with_prefix(prefix: str, tensors: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"{prefix}{name}": value for name, value in tensors.items()}


def strip_prefix(prefix: str, tensors: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {
        name[len(prefix) :]: value
        for name, value in tensors.items()
        if name.startswith(prefix)
    }
