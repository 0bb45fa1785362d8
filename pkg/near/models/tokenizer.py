"""
Lighting tokenizer: HDR 환경맵 → lighting condition tokens C_L (T×D)

1. pyramid_features: [E_ldr, E_log] 에 stride-2 patchify + linear + elu 를 L 번 적용
2. spatial_cross_attention: 레벨별로 방향 인코딩(E_dir)에 windowed cross-attention
3. build_tokens: flatten + concat → D 로 투영 + 위치 인코딩 → T 개 query 로
   attention pooling → RoPE + RMSNorm self-attention 블록
"""

import logging
from typing import List

import numpy as np

from near.core import functional as F
from near.core.errors import ConfigError, TensorError
from near.core.nn import (
    FeedForward,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    Parameter,
    RMSNorm,
)
from near.core.tensor import Tensor, as_tensor, concat, elu, reshape, transpose
from near.lighting.envmap import EnvTriplet, downsample_directions

logger = logging.getLogger(__name__)


def patchify(x: Tensor) -> Tensor:
    """(h, w, c) → (h/2, w/2, 4c)"""
    h, w, c = x.shape
    x = reshape(x, (h // 2, 2, w // 2, 2, c))
    x = transpose(x, (0, 2, 1, 3, 4))
    return reshape(x, (h // 2, w // 2, 4 * c))


def to_windows(x: Tensor, window: int) -> Tensor:
    """(h, w, c) → (num_windows, window², c)"""
    h, w, c = x.shape
    x = reshape(x, (h // window, window, w // window, window, c))
    x = transpose(x, (0, 2, 1, 3, 4))
    return reshape(x, ((h // window) * (w // window), window * window, c))


def from_windows(x: Tensor, h: int, w: int, window: int) -> Tensor:
    c = x.shape[-1]
    x = reshape(x, (h // window, w // window, window, window, c))
    x = transpose(x, (0, 2, 1, 3, 4))
    return reshape(x, (h, w, c))


class TokenizerBlock(Module):
    """RMSNorm → RoPE self-attention → RMSNorm → FFN (residual)"""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        self.norm1 = RMSNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm2 = RMSNorm(dim)
        self.ffn = FeedForward(dim, 2 * dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        positions = np.arange(x.shape[0])
        x = x + self.attn(self.norm1(x), positions=positions)
        return x + self.ffn(self.norm2(x))


class LightingTokenizer(Module):
    """
    Args:
        env_height: 환경맵 H (W = 2H)
        levels: pyramid 레벨 수 L
        channels: pyramid feature 채널 수
        token_count: T
        dim: D
        num_heads: attention head 수
        dir_frequencies: E_dir sinusoidal 주파수 수
        window: spatial cross-attention 창 크기 (픽셀, 레벨 공통)
        blocks: RoPE self-attention 블록 수
    """

    def __init__(
        self,
        rng: np.random.Generator,
        env_height: int = 64,
        levels: int = 3,
        channels: int = 32,
        token_count: int = 64,
        dim: int = 64,
        num_heads: int = 4,
        dir_frequencies: int = 4,
        window: int = 4,
        blocks: int = 2,
        pos_frequencies: int = 4,
    ):
        if levels < 1:
            raise ConfigError("tokenizer needs at least one pyramid level")
        if env_height % (2**levels):
            raise ConfigError(
                f"env height {env_height} is not divisible by 2^{levels}"
            )
        coarsest = env_height // 2**levels
        if coarsest % window:
            raise ConfigError(
                f"window {window} does not divide the coarsest level height {coarsest}"
            )
        self.env_height = env_height
        self.levels = levels
        self.channels = channels
        self.token_count = token_count
        self.dim = dim
        self.dir_frequencies = dir_frequencies
        self.window = window
        self.pos_frequencies = pos_frequencies

        stages = []
        in_ch = 6
        for _ in range(levels):
            stages.append(Linear(4 * in_ch, channels, rng))
            in_ch = channels
        self.stages = ModuleList(stages)
        self.dir_attn = ModuleList(
            [
                MultiHeadAttention(channels, num_heads, rng, kv_dim=6 * dir_frequencies)
                for _ in range(levels)
            ]
        )
        self.in_proj = Linear(channels, dim, rng)
        self.pos_proj = Linear(2 * pos_frequencies * 3, dim, rng)
        self.queries = Parameter(rng.normal(0.0, 0.02, size=(token_count, dim)))
        self.pool = MultiHeadAttention(dim, num_heads, rng)
        self.blocks = ModuleList([TokenizerBlock(dim, num_heads, rng) for _ in range(blocks)])
        self.out_norm = RMSNorm(dim)

    # ------------------------------------------------------------------
    def pyramid_features(self, e_ldr: np.ndarray, e_log: np.ndarray) -> List[Tensor]:
        """
        Returns:
            레벨 ℓ = 1..L 의 (H/2^ℓ, W/2^ℓ, channels) feature

        Raises:
            TensorError: H 가 2^L 로 나누어지지 않는 경우
        """
        h = e_ldr.shape[0]
        if h % (2**self.levels):
            raise TensorError(f"map height {h} is not divisible by 2^{self.levels}")
        x = as_tensor(np.concatenate([e_ldr, e_log], axis=-1))
        feats = []
        for stage in self.stages:
            x = elu(stage(patchify(x)))
            feats.append(x)
        return feats

    def spatial_cross_attention(self, feats: List[Tensor], e_dir: np.ndarray) -> List[Tensor]:
        """
        레벨별 visual feature 가 같은 창 안의 방향 인코딩을 attend (residual)

        Raises:
            TensorError: 레벨 수나 해상도가 맞지 않는 경우
        """
        if len(feats) != self.levels:
            raise TensorError(f"expected {self.levels} levels, got {len(feats)}")
        fused = []
        for level, (feat, attn) in enumerate(zip(feats, self.dir_attn), start=1):
            h, w, _ = feat.shape
            factor = 2**level
            if e_dir.shape[0] != h * factor or e_dir.shape[1] != w * factor:
                raise TensorError(f"direction map does not match level {level} ({h}x{w})")
            dirs = downsample_directions(e_dir, factor)
            enc = F.sinusoidal_encode(dirs.astype(feat.dtype), self.dir_frequencies)
            q = to_windows(feat, self.window)
            kv = to_windows(enc, self.window)
            out = from_windows(attn(q, context=kv), h, w, self.window)
            fused.append(feat + out)
        return fused

    def _positions(self, fused: List[Tensor]) -> np.ndarray:
        rows = []
        for level, feat in enumerate(fused, start=1):
            h, w, _ = feat.shape
            yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
            lvl = np.full_like(yy, level / self.levels)
            rows.append(np.stack([xx, yy, lvl], axis=-1).reshape(-1, 3))
        return np.concatenate(rows, axis=0)

    def build_tokens(self, fused: List[Tensor]) -> Tensor:
        """(Σ h_ℓ·w_ℓ) 개 토큰을 T×D lighting token 으로 축약"""
        flat = [reshape(f, (f.shape[0] * f.shape[1], f.shape[2])) for f in fused]
        x = self.in_proj(concat(flat, axis=0))
        pos = F.sinusoidal_encode(self._positions(fused).astype(x.dtype), self.pos_frequencies)
        x = x + self.pos_proj(pos)
        tokens = self.queries + self.pool(self.queries, context=x)
        for block in self.blocks:
            tokens = block(tokens)
        return self.out_norm(tokens)

    def forward(self, triplet: EnvTriplet) -> Tensor:
        feats = self.pyramid_features(triplet.e_ldr, triplet.e_log)
        fused = self.spatial_cross_attention(feats, triplet.e_dir)
        return self.build_tokens(fused)
