"""
8-bit PNG 입출력 (Pillow). HDR 은 AgX 로 tone mapping 후 저장합니다.
"""

import logging

import numpy as np
from PIL import Image

from near.core.errors import FormatError
from near.losses.tonemap import tonemap_agx

logger = logging.getLogger(__name__)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[0, 1] float → uint8 (반올림)"""
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise FormatError("cannot quantize an image with NaN or Inf")
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str, image: np.ndarray) -> None:
    """(H, W) 또는 (H, W, 3) LDR 이미지"""
    image = np.asarray(image)
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] != 3):
        raise FormatError(f"PNG output expects (H, W) or (H, W, 3), got {image.shape}")
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_png(path: str) -> np.ndarray:
    """PNG → [0, 1] float32"""
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB" if img.mode not in ("L", "I;16") else "L"))
    except OSError as e:
        raise FormatError(f"Unreadable PNG {path}: {e}") from e
    return data.astype(np.float32) / 255.0


def write_hdr_png(path: str, hdr: np.ndarray) -> None:
    write_png(path, tonemap_agx(hdr))
