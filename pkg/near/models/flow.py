"""
Rectified flow: 직선 경로 z(t) = (1−t)·z0 + t·ε 와 Euler sampler

t = 0 이 데이터, t = 1 이 noise 입니다. 속도장의 목표는 ε − z0 이고
sampler 는 t = 1 에서 Δt = 1/S 씩 t = 0 까지 내려갑니다.
"""

import logging
from typing import Optional, Tuple, Union

import numpy as np

from near.core.errors import NonFiniteError, SlatError, TensorError, TrainingError
from near.core.tensor import Tensor, TensorLike, as_tensor, mean
from near.latent.slat import Slat
from near.models.velocity import FlowConditions

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 25


def _check_time(t: np.ndarray) -> None:
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise TensorError(f"flow time must lie in [0, 1], got range [{t.min()}, {t.max()}]")


def interpolate(z0: np.ndarray, eps: np.ndarray, t: Union[float, np.ndarray]) -> np.ndarray:
    """
    (1−t)·z0 + t·ε

    Args:
        t: scalar 또는 행별 (B,) 시간

    Raises:
        TensorError: shape 불일치, t 가 [0, 1] 밖
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise TensorError(f"interpolate shape mismatch: {z0.shape} vs {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    _check_time(t)
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (z0.ndim - 1))
    return ((1.0 - t) * z0 + t * eps).astype(z0.dtype)


def cfm_loss(v_pred: TensorLike, z0: np.ndarray, eps: np.ndarray) -> Tensor:
    """mean((v − (ε − z0))²)"""
    v_pred = as_tensor(v_pred)
    target = np.asarray(eps) - np.asarray(z0)
    if v_pred.shape != target.shape:
        raise TensorError(f"cfm_loss shape mismatch: {v_pred.shape} vs {target.shape}")
    diff = v_pred - target.astype(v_pred.dtype)
    return mean(diff * diff)


def sample_noise(shape: Tuple[int, ...], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def sample(
    net,
    conditions,
    shape: Tuple[int, ...],
    steps: int = DEFAULT_STEPS,
    seed: int = 0,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Euler 적분으로 ε (t=1) 에서 z0 (t=0) 를 추정

    Args:
        net: velocity(z, t, conditions) 를 제공하는 객체
        shape: 상태 shape
        steps: S ≥ 1
        seed: noise 시드 (noise 가 주어지면 무시)

    Raises:
        TensorError: S < 1
        NonFiniteError: 상태에 NaN/Inf 발생
    """
    if steps < 1:
        raise TensorError(f"sampler needs at least one step, got {steps}")
    z = sample_noise(shape, seed) if noise is None else np.array(noise, dtype=np.float64)
    if z.shape != tuple(shape):
        raise TensorError(f"noise shape {z.shape} does not match {shape}")
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        v = np.asarray(net.velocity(z, t, conditions), dtype=np.float64)
        z = z - dt * v
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"sampler state became non-finite at step {i} (t={t:.3f})")
    return z


def homogenize(
    net,
    slat_shaded: Slat,
    image_condition: np.ndarray,
    steps: int = DEFAULT_STEPS,
    seed: int = 0,
) -> Slat:
    """
    Z_s 를 condition 으로 LH-SLAT feature 를 sampling (좌표는 그대로)

    Raises:
        TrainingError: adapter 가 없거나 학습되지 않은 경우
        SlatError: feature 차원이 네트워크와 맞지 않는 경우
    """
    if not getattr(net, "has_adapters", False) or getattr(net, "adapter_steps", 0) < 1:
        raise TrainingError("homogenize requires a trained LoRA adapter")
    if slat_shaded.feature_dim != net.feature_dim:
        raise SlatError(
            f"shaded latent has D={slat_shaded.feature_dim}, flow expects {net.feature_dim}"
        )
    conditions = FlowConditions(
        slat_shaded.feats, image_condition, slat_shaded.coords, slat_shaded.grid_resolution
    )
    feats = sample(net, conditions, slat_shaded.feats.shape, steps=steps, seed=seed)
    return slat_shaded.with_feats(feats.astype(np.float32))


def make_two_moons(count: int, seed: int = 0, noise: float = 0.05) -> np.ndarray:
    """(count, 2) two-moons 점 구름, 대략 [−1, 2] × [−0.5, 1] 범위"""
    rng = np.random.default_rng(seed)
    upper = count // 2
    lower = count - upper
    a = rng.uniform(0.0, np.pi, size=upper)
    b = rng.uniform(0.0, np.pi, size=lower)
    top = np.stack([np.cos(a), np.sin(a)], axis=1)
    bottom = np.stack([1.0 - np.cos(b), 0.5 - np.sin(b)], axis=1)
    points = np.concatenate([top, bottom], axis=0)
    points += rng.normal(0.0, noise, size=points.shape)
    return points[rng.permutation(count)]


def flow_batch(
    z0: np.ndarray, rng: np.random.Generator, per_row_time: bool = False
) -> Tuple[np.ndarray, np.ndarray, Union[float, np.ndarray]]:
    """
    학습용 (ε, z_t, t) 한 묶음. t 는 [0, 1] 균등 분포

    per_row_time 이면 행마다 다른 t (2D toy), 아니면 asset 전체가 같은 t
    """
    eps = rng.standard_normal(z0.shape)
    t = rng.uniform(0.0, 1.0, size=z0.shape[0]) if per_row_time else float(rng.uniform(0.0, 1.0))
    return eps, interpolate(z0, eps, t), t
