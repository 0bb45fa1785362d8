"""
HDR 이미지 입출력

- Radiance RGBE (.hdr): "#?RADIANCE" 헤더, "-Y H +X W" 해상도, new-style RLE 스캔라인
- PFM (.pfm): "PF" (RGB) / "Pf" (gray), 음수 scale 은 little-endian, 행은 아래→위 순서
"""

import logging
import re
from typing import List

import numpy as np

from near.core.errors import FormatError

logger = logging.getLogger(__name__)

_RESOLUTION_RE = re.compile(rb"^-Y (\d+) \+X (\d+)$")


# ----------------------------------------------------------------------
# RGBE
# ----------------------------------------------------------------------
def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    """(..., 4) uint8 → (..., 3) float32, (R,G,B)·2^(E−128)/256, E=0 이면 0"""
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    exponent = rgbe[..., 3].astype(np.int32)
    scale = np.where(exponent > 0, np.ldexp(1.0, exponent - 136), 0.0)
    return (rgbe[..., :3].astype(np.float64) * scale[..., None]).astype(np.float32)


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if np.any(rgb < 0) or not np.all(np.isfinite(rgb)):
        raise FormatError("RGBE encoding requires finite non-negative values")
    peak = rgb.max(axis=-1)
    mantissa, exponent = np.frexp(peak)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    valid = peak > 1e-32
    scale = np.where(valid, mantissa * 256.0 / np.where(valid, peak, 1.0), 0.0)
    out[..., :3] = np.clip(np.floor(rgb * scale[..., None]), 0, 255).astype(np.uint8)
    out[..., 3] = np.where(valid, exponent + 128, 0).astype(np.uint8)
    return out


def _read_header(blob: bytes):
    if not (blob.startswith(b"#?RADIANCE") or blob.startswith(b"#?RGBE")):
        raise FormatError("Not a Radiance HDR file (missing #?RADIANCE header)")
    offset = 0
    lines: List[bytes] = []
    while True:
        end = blob.find(b"\n", offset)
        if end < 0:
            raise FormatError("Truncated Radiance header")
        line = blob[offset:end].rstrip(b"\r")
        offset = end + 1
        if not line:
            break
        lines.append(line)
    for line in lines:
        if line.startswith(b"FORMAT=") and line != b"FORMAT=32-bit_rle_rgbe":
            raise FormatError(f"Unsupported Radiance format {line.decode(errors='replace')}")
    end = blob.find(b"\n", offset)
    if end < 0:
        raise FormatError("Missing resolution line")
    match = _RESOLUTION_RE.match(blob[offset:end].strip())
    if not match:
        raise FormatError("Unsupported resolution line (expected '-Y H +X W')")
    height, width = int(match.group(1)), int(match.group(2))
    return height, width, end + 1


def _decode_scanline(blob: bytes, offset: int, width: int):
    total = len(blob)
    if offset + 4 > total:
        raise FormatError("Truncated scanline")
    head = blob[offset : offset + 4]
    is_rle = (
        8 <= width <= 0x7FFF
        and head[0] == 2
        and head[1] == 2
        and ((head[2] << 8) | head[3]) == width
    )
    if not is_rle:
        nbytes = 4 * width
        if offset + nbytes > total:
            raise FormatError("Truncated flat scanline")
        line = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=offset)
        return line.reshape(width, 4), offset + nbytes

    if head[2] & 0x80:
        raise FormatError("Bad scanline length")
    offset += 4
    line = np.empty((4, width), dtype=np.uint8)
    for channel in range(4):
        pos = 0
        while pos < width:
            if offset >= total:
                raise FormatError("Truncated run-length data")
            count = blob[offset]
            offset += 1
            if count > 128:
                count -= 128
                if count == 0 or pos + count > width:
                    raise FormatError("Bad scanline length")
                if offset >= total:
                    raise FormatError("Truncated run-length data")
                line[channel, pos : pos + count] = blob[offset]
                offset += 1
            else:
                if count == 0 or pos + count > width:
                    raise FormatError("Bad scanline length")
                if offset + count > total:
                    raise FormatError("Truncated run-length data")
                line[channel, pos : pos + count] = np.frombuffer(
                    blob, dtype=np.uint8, count=count, offset=offset
                )
                offset += count
            pos += count
    return line.T, offset


def decode_radiance_hdr(blob: bytes) -> np.ndarray:
    """
    Radiance RGBE 바이트를 (H, W, 3) float32 로 디코딩

    Raises:
        FormatError: 잘못된 헤더, 스캔라인 길이 오류, 절단
    """
    height, width, offset = _read_header(blob)
    rows = []
    for _ in range(height):
        line, offset = _decode_scanline(blob, offset, width)
        rows.append(line)
    rgbe = np.stack(rows) if rows else np.zeros((0, width, 4), dtype=np.uint8)
    return rgbe_to_float(rgbe)


def _encode_channel(values: np.ndarray) -> bytes:
    out = bytearray()
    n = len(values)
    pos = 0
    while pos < n:
        run = 1
        while pos + run < n and run < 127 and values[pos + run] == values[pos]:
            run += 1
        if run >= 4:
            out += bytes((128 + run, int(values[pos])))
            pos += run
            continue
        start = pos
        pos += 1
        while pos < n and pos - start < 128:
            ahead = 1
            while pos + ahead < n and ahead < 4 and values[pos + ahead] == values[pos]:
                ahead += 1
            if ahead >= 4:
                break
            pos += 1
        out.append(pos - start)
        out += bytes(int(v) for v in values[start:pos])
    return bytes(out)


def encode_radiance_hdr(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    height, width = rgb.shape[:2]
    rgbe = float_to_rgbe(rgb)
    parts = [
        b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n",
        f"-Y {height} +X {width}\n".encode("ascii"),
    ]
    for row in rgbe:
        if 8 <= width <= 0x7FFF:
            parts.append(bytes((2, 2, width >> 8, width & 0xFF)))
            for channel in range(4):
                parts.append(_encode_channel(row[:, channel]))
        else:
            parts.append(row.tobytes())
    return b"".join(parts)


def read_hdr(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_radiance_hdr(f.read())


def write_hdr(path: str, rgb: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_radiance_hdr(rgb))


# ----------------------------------------------------------------------
# PFM
# ----------------------------------------------------------------------
def encode_pfm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[2] == 3:
        tag = b"PF"
    elif image.ndim == 2:
        tag = b"Pf"
    else:
        raise FormatError(f"PFM stores (H, W) or (H, W, 3) images, got {image.shape}")
    height, width = image.shape[:2]
    header = tag + f"\n{width} {height}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(image[::-1], dtype="<f4").tobytes()


def decode_pfm(blob: bytes) -> np.ndarray:
    """
    Raises:
        FormatError: 잘못된 헤더 또는 절단
    """
    fields: List[bytes] = []
    offset = 0
    while len(fields) < 4:
        while offset < len(blob) and blob[offset : offset + 1].isspace():
            offset += 1
        start = offset
        while offset < len(blob) and not blob[offset : offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FormatError("Truncated PFM header")
        fields.append(blob[start:offset])
    offset += 1
    tag = fields[0]
    if tag not in (b"PF", b"Pf"):
        raise FormatError("Not a PFM file (bad magic)")
    try:
        width, height = int(fields[1]), int(fields[2])
        scale = float(fields[3])
    except ValueError as e:
        raise FormatError(f"Bad PFM header: {e}") from e
    channels = 3 if tag == b"PF" else 1
    count = width * height * channels
    dtype = "<f4" if scale < 0 else ">f4"
    if len(blob) - offset < 4 * count:
        raise FormatError("Truncated PFM payload")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).astype(np.float32)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape)[::-1].copy()


def write_pfm(path: str, image: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_pfm(image))


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pfm(f.read())
