"""
Tensor 위에 조합된 신경망 연산

attention, RMS normalization, rotary embedding, sinusoidal encoding 은 모두
tensor.py 의 primitive 를 조합하므로 backward 는 자동으로 기록됩니다.
"""

import logging
import math

import numpy as np

from near.core.errors import NonFiniteError, TensorError
from near.core.tensor import (
    Tensor,
    TensorLike,
    as_tensor,
    concat,
    cos,
    matmul,
    mean,
    mul,
    reshape,
    sin,
    softmax,
    sqrt,
    stack,
)

logger = logging.getLogger(__name__)


def attention(q: TensorLike, k: TensorLike, v: TensorLike) -> Tensor:
    """
    Scaled dot-product attention: softmax(QKᵀ/√d)V

    leading 축은 batch(head) 로 취급됩니다.

    Args:
        q: (..., n, d)
        k: (..., m, d)
        v: (..., m, d_v)

    Returns:
        Tensor: (..., n, d_v)

    Raises:
        TensorError: d == 0 또는 shape 불일치
        NonFiniteError: logits 에 NaN/Inf 가 있는 경우
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d <= 0:
        raise TensorError("attention requires a positive feature dimension")
    if k.shape[-1] != d:
        raise TensorError(f"attention query/key dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise TensorError(f"attention key/value counts differ: {k.shape} vs {v.shape}")

    logits = mul(matmul(q, k.swapaxes(-1, -2)), 1.0 / math.sqrt(d))
    if not logits.is_finite:
        raise NonFiniteError("attention logits contain NaN or Inf")
    return matmul(softmax(logits, axis=-1), v)


def rms_norm(x: TensorLike, scale: TensorLike, eps: float = 1e-6) -> Tensor:
    x = as_tensor(x)
    ms = mean(x * x, axis=-1, keepdims=True)
    return x / sqrt(ms + eps) * scale


def sinusoidal_encode(x: TensorLike, num_frequencies: int) -> Tensor:
    """
    (..., c) -> (..., 2·F·c)

    출력 순서는 k 마다 [sin(2^k π x) (c 채널), cos(2^k π x) (c 채널)] 입니다.
    """
    if num_frequencies < 1:
        raise TensorError("sinusoidal_encode requires at least one frequency")
    x = as_tensor(x)
    lead = x.shape[:-1]
    c = x.shape[-1]
    freqs = (2.0 ** np.arange(num_frequencies) * np.pi).astype(x.dtype)
    scaled = reshape(x, lead + (1, c)) * freqs.reshape(num_frequencies, 1)
    pairs = stack([sin(scaled), cos(scaled)], axis=-2)
    return reshape(pairs, lead + (2 * num_frequencies * c,))


def rotary_embedding(x: TensorLike, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """
    RoPE (half-split layout)

    Args:
        x: (..., n, d), d 짝수
        positions: (n,) 정수 또는 실수 위치
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise TensorError(f"rotary embedding requires an even dimension, got {d}")
    half = d // 2
    inv_freq = base ** (-np.arange(half) / half)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    c = np.cos(angles).astype(x.dtype)
    s = np.sin(angles).astype(x.dtype)
    x1 = x[..., :half]
    x2 = x[..., half:]
    return concat([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-element softmax loop used as a cross-check for ``attention``."""
    n, d = q.shape
    out = np.zeros((n, v.shape[1]), dtype=np.float64)
    for i in range(n):
        logits = [float(np.dot(q[i], k[j])) / math.sqrt(d) for j in range(k.shape[0])]
        top = max(logits)
        weights = [math.exp(value - top) for value in logits]
        total = sum(weights)
        for j, weight in enumerate(weights):
            out[i] += weight / total * v[j]
    return out
