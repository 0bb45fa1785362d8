"""
Tone mapping

- tonemap_log2: clamp(log₂(I), 0, 1), loss 계산용 (미분 가능)
- tonemap_agx: 표시용 AgX 곡선 (PNG 출력)
"""

import math

import numpy as np

from near.core.errors import TensorError
from near.core.tensor import Tensor, TensorLike, as_tensor, clip, log

# AgX inset 행렬 (열 우선으로 주어진 계수를 행렬 곱에 사용)
AGX_INSET = np.array(
    [
        [0.842479062253094, 0.0423282422610123, 0.0423756549057051],
        [0.0784335999999992, 0.878468636469772, 0.0784336],
        [0.0792237451477643, 0.0791661274605434, 0.879142973793104],
    ]
)
AGX_MIN_EV = -12.47393
AGX_MAX_EV = 4.026069
# 6차 sigmoid 근사 계수, x⁶ 부터 상수항 순
AGX_CURVE = (15.5, -40.14, 31.96, -6.868, 0.4298, 0.1191, -0.00232)


def tonemap_log2(image: TensorLike) -> Tensor:
    """
    clamp(log₂ I, 0, 1) = log₂(clamp(I, 1, 2)); log₂ 0 은 0 으로 취급

    Raises:
        TensorError: 음수 입력
    """
    image = as_tensor(image)
    if np.any(image.data < 0):
        raise TensorError("tonemap_log2 requires non-negative input")
    return log(clip(image, 1.0, 2.0)) * (1.0 / math.log(2.0))


def agx_curve(x: np.ndarray) -> np.ndarray:
    return np.polyval(AGX_CURVE, x)


def tonemap_agx(image: np.ndarray) -> np.ndarray:
    """
    HDR → 표시용 [0, 1]

    inset 행렬 → log₂ 를 [−12.47, 4.03] EV 창으로 clamp 후 정규화 → 6차 곡선.
    """
    image = np.asarray(image, dtype=np.float64)
    mixed = image @ AGX_INSET
    with np.errstate(divide="ignore"):
        ev = np.log2(np.maximum(mixed, 0.0))
    ev = np.clip(ev, AGX_MIN_EV, AGX_MAX_EV)
    x = (ev - AGX_MIN_EV) / (AGX_MAX_EV - AGX_MIN_EV)
    return np.clip(agx_curve(x), 0.0, 1.0)
