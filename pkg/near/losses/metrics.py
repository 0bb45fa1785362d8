"""
이미지 품질 지표

SSIM 은 11×11 Gaussian 창(σ=1.5)의 "valid" 필터링을 banded 행렬 곱으로
구현하여 tape 위에서 미분 가능합니다. PSNR 은 보고용으로 99 dB 에서 cap 됩니다.
"""

import math
from typing import Tuple

import numpy as np

from near.core.errors import TensorError
from near.core.tensor import Tensor, TensorLike, as_tensor, matmul, mean, reshape, transpose

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0


def gaussian_window(size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def banded_filter(length: int, window: np.ndarray) -> np.ndarray:
    """(length − k + 1, length) valid 필터 행렬"""
    k = window.size
    out = np.zeros((length - k + 1, length))
    for i in range(length - k + 1):
        out[i, i : i + k] = window
    return out


def _window_size(height: int, width: int) -> int:
    size = min(SSIM_WINDOW, height, width)
    return size if size % 2 else size - 1


def _to_channels(image: Tensor) -> Tensor:
    """(H, W[, C]) → (C, H, W)"""
    if image.ndim == 2:
        return reshape(image, (1,) + image.shape)
    return transpose(image, (2, 0, 1))


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise TensorError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise TensorError(f"expected (H, W) or (H, W, C) images, got {a.shape}")


def ssim(a: TensorLike, b: TensorLike) -> Tensor:
    """
    평균 SSIM (data range 1)

    Raises:
        TensorError: shape 불일치
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b)
    h, w = a.shape[:2]
    size = _window_size(h, w)
    if size < 1:
        raise TensorError(f"image {h}x{w} is too small for SSIM")
    window = gaussian_window(size).astype(a.dtype)
    rows = banded_filter(h, window).astype(a.dtype)
    cols = banded_filter(w, window).T.astype(a.dtype)

    def blur(x: Tensor) -> Tensor:
        return matmul(matmul(rows, x), cols)

    x, y = _to_channels(a), _to_channels(b)
    mu_x, mu_y = blur(x), blur(y)
    xx, yy, xy = blur(x * x), blur(y * y), blur(x * y)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return mean(num / den)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR = 10·log10(1/MSE), 99 dB cap"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise TensorError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def image_metrics(prediction: np.ndarray, target: np.ndarray) -> Tuple[float, float]:
    """(psnr, ssim) for LDR images in [0, 1]"""
    return psnr(prediction, target), ssim(prediction, target).item()
