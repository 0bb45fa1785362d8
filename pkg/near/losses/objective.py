"""
Stage-2 objective

    L = L_recon + λ_pbr·L_pbr + λ_shadow·L_shadow + λ_vol·L_vol + λ_α·L_α

L_recon 은 log 영역 L1 과 (1 − SSIM) 항만 포함합니다 (perceptual 항 없음).
"""

import logging
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from near.core.errors import TensorError
from near.core.tensor import Tensor, TensorLike, as_tensor, log, mean, tabs
from near.losses.metrics import ssim
from near.losses.tonemap import tonemap_log2
from near.schemas.loss import LossWeights

logger = logging.getLogger(__name__)

PBR_MAPS = ("basecolor", "roughness", "metallic", "shadow")
LOSS_TERMS = ("recon", "pbr", "shadow", "vol", "alpha")


def _check_shapes(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{what} shape mismatch: {a.shape} vs {b.shape}")


def l1(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_shapes(a, b, "L1")
    return mean(tabs(a - b))


def loss_recon(image: TensorLike, target: TensorLike, ssim_weight: float = 0.2) -> Tensor:
    """
    L1(log(I+1), log(I_gt+1)) + w·(1 − SSIM(tm(I), tm(I_gt))), tm = tonemap_log2

    Raises:
        TensorError: shape 불일치
    """
    image, target = as_tensor(image), as_tensor(target)
    _check_shapes(image, target, "recon")
    log_term = mean(tabs(log(image + 1.0) - log(target + 1.0)))
    if ssim_weight == 0.0:
        return log_term
    return log_term + ssim_weight * (1.0 - ssim(tonemap_log2(image), tonemap_log2(target)))


def loss_pbr(prediction: Mapping[str, TensorLike], target: Mapping[str, TensorLike]) -> Tensor:
    """basecolor / roughness / metallic / shadow map 의 L1 합"""
    total = None
    for name in PBR_MAPS:
        term = l1(prediction[name], target[name])
        total = term if total is None else total + term
    return total


def loss_shadow(prediction: TensorLike, target: TensorLike) -> Tensor:
    return l1(prediction, target)


def loss_reg(
    scales: TensorLike, light_scales: TensorLike, opacity: TensorLike
) -> Tuple[Tensor, Tensor]:
    """
    L_vol = mean Πs + mean Πŝ,  L_α = mean (1 − α)²

    Args:
        scales, light_scales: (G, 3)
        opacity: (G,)
    """
    s, sl = as_tensor(scales), as_tensor(light_scales)
    vol = mean(s[:, 0] * s[:, 1] * s[:, 2]) + mean(sl[:, 0] * sl[:, 1] * sl[:, 2])
    gap = 1.0 - as_tensor(opacity)
    return vol, mean(gap * gap)


def total_loss(parts: Mapping[str, TensorLike], weights: Optional[LossWeights] = None) -> Tensor:
    """parts 키: recon, pbr, shadow, vol, alpha"""
    weights = weights or LossWeights()
    scale = {
        "recon": 1.0,
        "pbr": weights.lambda_pbr,
        "shadow": weights.lambda_shadow,
        "vol": weights.lambda_vol,
        "alpha": weights.lambda_alpha,
    }
    missing = [name for name in LOSS_TERMS if name not in parts]
    if missing:
        raise TensorError(f"total_loss is missing terms {missing}")
    total = as_tensor(parts["recon"]) * scale["recon"]
    for name in LOSS_TERMS[1:]:
        total = total + as_tensor(parts[name]) * scale[name]
    return total


def loss_values(parts: Mapping[str, Tensor]) -> Dict[str, float]:
    return {name: float(np.asarray(as_tensor(value).data)) for name, value in parts.items()}
