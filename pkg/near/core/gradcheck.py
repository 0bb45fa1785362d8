"""
Central finite-difference 기반 gradient 검증
"""

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from near.core.tensor import Tape, Tensor, no_grad, tsum

logger = logging.getLogger(__name__)


def _scalarize(out: Tensor, cotangent: Optional[np.ndarray]) -> Tensor:
    if out.size == 1:
        return tsum(out)
    return tsum(out * cotangent)


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: Optional[float] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    fn 의 analytic gradient 를 central difference 와 비교

    fn 은 inputs 를 읽어 Tensor 를 반환하는 클로저입니다. 출력이 scalar 가
    아니면 고정된 랜덤 cotangent 와 내적하여 scalar 로 만듭니다.

    Args:
        fn: 연산 subgraph
        inputs: 검사할 requires_grad tensor 들 (data 를 in-place 로 흔듦)
        eps: 차분 간격, None 이면 dtype 에 따라 1e-6 (float64) / 1e-3 (float32)
        max_coords: 입력당 검사할 최대 좌표 수 (None 이면 전체)
        seed: 좌표 선택과 cotangent 용 시드

    Returns:
        float: 최대 상대 오차
    """
    rng = np.random.default_rng(seed)
    with no_grad():
        first_output = fn()
    cotangent = None
    if first_output.size != 1:
        cotangent = rng.uniform(0.5, 1.5, size=first_output.shape).astype(first_output.dtype)

    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        loss = _scalarize(fn(), cotangent)
    tape.backward(loss)
    analytic = [np.array(t.grad, dtype=np.float64) for t in inputs]

    scale = max([float(np.abs(a).max()) if a.size else 0.0 for a in analytic] + [0.0])
    floor = max(1e-2 * scale, 1e-12)

    max_err = 0.0
    for t, grad in zip(inputs, analytic):
        step = eps if eps is not None else (1e-6 if t.dtype == np.float64 else 1e-3)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        grad_flat = grad.reshape(-1)
        for i in coords:
            original = flat[i]
            with no_grad():
                flat[i] = original + step
                plus = float(_scalarize(fn(), cotangent).item())
                flat[i] = original - step
                minus = float(_scalarize(fn(), cotangent).item())
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(grad_flat[i]), abs(numeric), floor)
            max_err = max(max_err, abs(grad_flat[i] - numeric) / denom)

    logger.debug(f"grad_check over {len(inputs)} inputs: max rel err {max_err:.3e}")
    return max_err
