"""
View 별 feature 이미지

픽셀별 raw 채널 [world normal(3), albedo(3), log1p(shaded rgb)(3), roughness,
metallic, coverage] 를 seed 로 고정된 projection 으로 D 차원에 올립니다.
basecolor feature 는 albedo 를 별도 projection 으로 D_bc 차원에 올립니다.
"""

import logging
from typing import Tuple

import numpy as np

from near.oracle.shading import OracleFrame

logger = logging.getLogger(__name__)

RAW_CHANNELS = 12


def feature_projections(feature_dim: int, basecolor_dim: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, 1.0 / np.sqrt(RAW_CHANNELS), size=(RAW_CHANNELS, feature_dim))
    bc_proj = rng.normal(0.0, 1.0 / np.sqrt(3.0), size=(3, basecolor_dim))
    return proj, bc_proj


def raw_channels(frame: OracleFrame) -> np.ndarray:
    return np.concatenate(
        [
            frame.normal,
            frame.basecolor,
            np.log1p(np.maximum(frame.hdr, 0.0)),
            frame.roughness[..., None],
            frame.metallic[..., None],
            frame.alpha[..., None],
        ],
        axis=-1,
    )


def render_features(
    frame: OracleFrame, feature_dim: int, basecolor_dim: int, seed: int = 0
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns:
        (features (H, W, D), basecolor features (H, W, D_bc), coverage (H, W) bool)
        배경 픽셀의 feature 는 0
    """
    proj, bc_proj = feature_projections(feature_dim, basecolor_dim, seed)
    coverage = frame.alpha > 0.5
    feats = raw_channels(frame) @ proj
    bc = frame.basecolor @ bc_proj
    feats[~coverage] = 0.0
    bc[~coverage] = 0.0
    return feats, bc, coverage


def image_condition(features: np.ndarray, coverage: np.ndarray) -> np.ndarray:
    """입력 이미지의 전역 condition 벡터: foreground feature 평균"""
    if not np.any(coverage):
        return np.zeros(features.shape[-1])
    return features[coverage].mean(axis=0)
