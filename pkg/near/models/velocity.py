"""
Rectified-flow velocity 네트워크

- VelocityNet: SLAT token 위의 shifted-window transformer.
  입력은 상태 z 와 shaded latent Z_s 의 channel concat, 시간 embedding 과
  이미지 condition 벡터가 모든 token 에 더해집니다.
- ToyVelocityMLP: 2D sanity flow (two-moons) 용 MLP
- ConstantVelocity: 고정된 속도장을 돌려주는 oracle (sampler 검증용)
"""

import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

import near.core.functional as F
from near.core.errors import SlatError, TensorError
from near.core.nn import MLP, FeedForward, Linear, Module, ModuleList, MultiHeadAttention, RMSNorm, windowed_apply
from near.core.tensor import Tensor, TensorLike, as_tensor, concat, default_dtype, no_grad, reshape
from near.latent.window import WindowGrouping, window_partition
from near.models.lora import attach_lora, lora_parameters

logger = logging.getLogger(__name__)

TIME_FREQUENCIES = 8


def time_embedding_input(t: Union[float, np.ndarray], count: int, dtype) -> Tensor:
    """t (scalar 또는 (count,)) → (count, 2·F) sinusoidal 인코딩"""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size == 1:
        t = np.full(count, t[0])
    if t.size != count:
        raise TensorError(f"time has {t.size} entries for {count} rows")
    return F.sinusoidal_encode(t.reshape(-1, 1).astype(dtype), TIME_FREQUENCIES)


class FlowConditions:
    """
    VelocityNet 의 condition 묶음

    Attributes:
        shaded: (K, D) Z_s feature (base 단계에서는 0)
        image: (C,) 입력 이미지의 전역 condition 벡터
        coords: (K, 3) voxel 좌표 (window 분할용)
        grid_resolution: N
    """

    def __init__(
        self,
        shaded: np.ndarray,
        image: np.ndarray,
        coords: np.ndarray,
        grid_resolution: int,
    ):
        self.shaded = np.asarray(shaded)
        self.image = np.asarray(image).reshape(-1)
        self.coords = np.asarray(coords, dtype=np.int64)
        self.grid_resolution = int(grid_resolution)
        if self.shaded.shape[0] != self.coords.shape[0]:
            raise SlatError(
                f"shaded latent has {self.shaded.shape[0]} rows for {self.coords.shape[0]} voxels"
            )
        self._groupings: Dict[tuple, WindowGrouping] = {}

    def grouping(self, window_size: int, shifted: bool) -> WindowGrouping:
        key = (window_size, shifted)
        if key not in self._groupings:
            self._groupings[key] = window_partition(
                self.coords, self.grid_resolution, window_size, shifted
            )
        return self._groupings[key]


class VelocityBlock(Module):
    """RMSNorm → windowed self-attention → RMSNorm → FFN (residual)"""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        self.norm1 = RMSNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm2 = RMSNorm(dim)
        self.ffn = FeedForward(dim, 2 * dim, rng)

    def forward(self, x: Tensor, groups: Sequence[np.ndarray]) -> Tensor:
        x = x + windowed_apply(self.attn, self.norm1(x), groups)
        return x + self.ffn(self.norm2(x))


class VelocityNet(Module):
    """
    v_θ(z, t | Z_s, c)

    Args:
        feature_dim: SLAT feature 차원 D
        cond_dim: 이미지 condition 벡터 차원
        dim: 내부 폭
        blocks: transformer 블록 수 (홀수 번째 블록은 shifted window)
        window_size: window 크기 w (N 을 나누어야 함)
    """

    def __init__(
        self,
        rng: np.random.Generator,
        feature_dim: int,
        cond_dim: int,
        dim: int = 64,
        num_heads: int = 4,
        blocks: int = 2,
        window_size: int = 4,
    ):
        self.feature_dim = feature_dim
        self.cond_dim = cond_dim
        self.dim = dim
        self.window_size = window_size
        self.in_proj = Linear(2 * feature_dim, dim, rng)
        self.time_mlp = MLP([2 * TIME_FREQUENCIES, dim, dim], rng)
        self.cond_proj = Linear(cond_dim, dim, rng)
        self.blocks = ModuleList([VelocityBlock(dim, num_heads, rng) for _ in range(blocks)])
        self.out_norm = RMSNorm(dim)
        self.out_proj = Linear(dim, feature_dim, rng)
        # adapter 학습이 끝난 step 수, 0 이면 homogenize 를 거부
        self.adapter_steps = 0

    def attach_adapters(self, rank: int, alpha: float, rng: np.random.Generator) -> List[str]:
        return attach_lora(self, rank, alpha, rng)

    @property
    def has_adapters(self) -> bool:
        return bool(lora_parameters(self))

    def forward(self, z: TensorLike, t: float, conditions: FlowConditions) -> Tensor:
        """
        Args:
            z: (K, D) 현재 상태
            t: 시간 [0, 1]
            conditions: Z_s / 이미지 condition / 좌표

        Raises:
            TensorError: 차원 불일치
        """
        z = as_tensor(z)
        k = z.shape[0]
        if z.shape != (k, self.feature_dim) or conditions.shaded.shape != z.shape:
            raise TensorError(
                f"velocity input {z.shape} / condition {conditions.shaded.shape} "
                f"do not match feature dim {self.feature_dim}"
            )
        if conditions.image.shape[0] != self.cond_dim:
            raise TensorError(
                f"image condition has {conditions.image.shape[0]} dims, expected {self.cond_dim}"
            )
        dtype = z.dtype
        x = self.in_proj(concat([z, conditions.shaded.astype(dtype)], axis=1))
        x = x + self.time_mlp(time_embedding_input(t, 1, dtype))
        x = x + self.cond_proj(reshape(as_tensor(conditions.image.astype(dtype)), (1, self.cond_dim)))
        for i, block in enumerate(self.blocks):
            grouping = conditions.grouping(self.window_size, shifted=i % 2 == 1)
            x = block(x, grouping.groups)
        return self.out_proj(self.out_norm(x))

    def velocity(self, z: np.ndarray, t: float, conditions: FlowConditions) -> np.ndarray:
        with no_grad():
            return self.forward(z.astype(default_dtype()), t, conditions).numpy()


class ToyVelocityMLP(Module):
    """2D 점 구름용 v_θ(z, t), t 는 scalar 또는 행별 (B,)"""

    def __init__(self, rng: np.random.Generator, dim: int = 2, hidden: int = 64, layers: int = 3):
        self.dim = dim
        dims = [dim + 2 * TIME_FREQUENCIES] + [hidden] * layers + [dim]
        self.mlp = MLP(dims, rng)

    def forward(self, z: TensorLike, t, conditions=None) -> Tensor:
        z = as_tensor(z)
        temb = time_embedding_input(t, z.shape[0], z.dtype)
        return self.mlp(concat([z, temb], axis=1))

    def velocity(self, z: np.ndarray, t: float, conditions=None) -> np.ndarray:
        with no_grad():
            return self.forward(z.astype(default_dtype()), t).numpy()


class ConstantVelocity:
    """상태와 시간에 무관하게 v ≡ field 를 돌려주는 oracle"""

    def __init__(self, field: np.ndarray):
        self.field = np.asarray(field, dtype=np.float64)

    def velocity(self, z: np.ndarray, t: float, conditions: Optional[object] = None) -> np.ndarray:
        if z.shape != self.field.shape:
            raise TensorError(f"state {z.shape} does not match the oracle field {self.field.shape}")
        return self.field
