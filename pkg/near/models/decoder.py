"""
Stage-2 decoder

    SLAT ─input─▶ IAD (shifted-window self-attn + register bridge) ─▶ h
    h + e^d + e^l ─▶ LAD (light-token cross-attn + register bridge) ─▶ h^e
    h  ─intrinsic head─▶ offset / basecolor / roughness / metallic / scale / rotation / opacity
    h^e ─lighting head─▶ color feature f / lighting scale ŝ / shadow σ
    (normal(ŝ, r), f) ─radiance head─▶ HDR radiance

voxel 하나당 K_g 개의 Gaussian 을 만듭니다. 체크포인트 이름은
input/, tokenizer/, iad/, lad/, heads/, registers/ 로 시작합니다.
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np

import near.core.functional as F
from near.core.errors import ConfigError, GeometryError, TensorError
from near.core.nn import (
    MLP,
    Embedding,
    FeedForward,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    Parameter,
    RMSNorm,
    windowed_apply,
)
from near.core.tensor import (
    Tensor,
    TensorLike,
    as_tensor,
    concat,
    elu,
    reshape,
    sigmoid,
    softplus,
    sqrt,
    tanh,
    tsum,
)
from near.latent.slat import Slat, voxel_centers
from near.latent.window import window_partition
from near.lighting.envmap import EnvTriplet
from near.models.tokenizer import LightingTokenizer
from near.render.camera import Camera
from near.render.gaussians import GaussianSet, quaternion_to_matrix

logger = logging.getLogger(__name__)

REGISTER_COUNT = 16
DISTANCE_BINS = 64
COLOR_FEATURE_DIM = 48
# offset 3, basecolor 3, roughness 1, metallic 1, scale 3, rotation 4, opacity 1
INTRINSIC_CHANNELS = 16
# f 48, ŝ 3, σ 1
LIGHTING_CHANNELS = COLOR_FEATURE_DIM + 4
DIRECTION_FREQUENCIES = 4
NORMAL_FREQUENCIES = 4

LAD_VARIANTS = ("view_first", "light_first")
DECODER_INPUTS = ("lh", "shaded", "basecolor", "lh_basecolor")


# ----------------------------------------------------------------------
# View embedding
# ----------------------------------------------------------------------
def view_directions(
    coords: np.ndarray, grid_resolution: int, camera: Camera
) -> Tuple[np.ndarray, np.ndarray]:
    """
    voxel 중심의 카메라 좌표계 단위 방향 d 와 거리 l

    Raises:
        GeometryError: voxel 중심이 카메라 원점과 일치하는 경우
    """
    pc = camera.world_to_camera(voxel_centers(coords, grid_resolution))
    distance = np.linalg.norm(pc, axis=1)
    if np.any(distance < 1e-9):
        raise GeometryError("a voxel center coincides with the camera origin")
    return pc / distance[:, None], distance


class ViewEmbedding:
    """
    Attributes:
        directions: (L, 3) 카메라 좌표계 단위 방향
        distances: (L,) 카메라-voxel 거리
        e_dir, e_dist: (L, D) 인코딩
    """

    def __init__(self, directions: np.ndarray, distances: np.ndarray, e_dir: Tensor, e_dist: Tensor):
        self.directions = directions
        self.distances = distances
        self.e_dir = e_dir
        self.e_dist = e_dist

    def combined(self) -> Tensor:
        return self.e_dir + self.e_dist


class ViewEmbedder(Module):
    """e^d = proj(sinusoidal(d)), e^l = table[bin(l / l_max)]"""

    def __init__(self, dim: int, rng: np.random.Generator, max_distance: float = 6.0):
        self.max_distance = float(max_distance)
        self.dir_proj = Linear(2 * DIRECTION_FREQUENCIES * 3, dim, rng)
        self.distance_table = Embedding(DISTANCE_BINS, dim, rng)

    def distance_bins(self, distances: np.ndarray) -> np.ndarray:
        bins = np.floor(distances / self.max_distance * DISTANCE_BINS).astype(np.int64)
        return np.clip(bins, 0, DISTANCE_BINS - 1)

    def forward(self, coords: np.ndarray, grid_resolution: int, camera: Camera) -> ViewEmbedding:
        directions, distances = view_directions(coords, grid_resolution, camera)
        dtype = self.dir_proj.weight.dtype
        e_dir = self.dir_proj(F.sinusoidal_encode(directions.astype(dtype), DIRECTION_FREQUENCIES))
        e_dist = self.distance_table(self.distance_bins(distances))
        return ViewEmbedding(directions, distances, e_dir, e_dist)


# ----------------------------------------------------------------------
# Blocks
# ----------------------------------------------------------------------
class RegisterTokens(Module):
    """IAD / LAD 각각 16 개의 학습 가능한 register token"""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.iad = Parameter(rng.normal(0.0, 0.02, size=(REGISTER_COUNT, dim)))
        self.lad = Parameter(rng.normal(0.0, 0.02, size=(REGISTER_COUNT, dim)))


class RegisterBridge(Module):
    """
    register 가 먼저 모든 latent 를 attend 하여 갱신되고, 이어서 latent 가
    갱신된 register 를 cross-attend 합니다. latent 쪽 출력 projection 은 0 초기화.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        self.gather_norm = RMSNorm(dim)
        self.gather = MultiHeadAttention(dim, num_heads, rng)
        self.read_norm = RMSNorm(dim)
        self.read = MultiHeadAttention(dim, num_heads, rng, zero_init_output=True)

    def forward(self, x: Tensor, registers: Tensor) -> Tuple[Tensor, Tensor]:
        registers = registers + self.gather(registers, context=self.gather_norm(x))
        x = x + self.read(self.read_norm(x), context=registers)
        return x, registers


class IADBlock(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        self.norm1 = RMSNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.bridge = RegisterBridge(dim, num_heads, rng)
        self.norm2 = RMSNorm(dim)
        self.ffn = FeedForward(dim, 2 * dim, rng)

    def forward(self, x: Tensor, registers: Tensor, groups) -> Tuple[Tensor, Tensor]:
        x = x + windowed_apply(self.attn, self.norm1(x), groups)
        x, registers = self.bridge(x, registers)
        return x + self.ffn(self.norm2(x)), registers


class LADBlock(Module):
    def __init__(self, dim: int, token_dim: int, num_heads: int, rng: np.random.Generator):
        self.light_norm = RMSNorm(dim)
        self.light_attn = MultiHeadAttention(
            dim, num_heads, rng, kv_dim=token_dim, zero_init_output=True
        )
        self.bridge = RegisterBridge(dim, num_heads, rng)
        self.norm2 = RMSNorm(dim)
        self.ffn = FeedForward(dim, 2 * dim, rng)

    def forward(self, x: Tensor, registers: Tensor, tokens: Tensor) -> Tuple[Tensor, Tensor]:
        x = x + self.light_attn(self.light_norm(x), context=tokens)
        x, registers = self.bridge(x, registers)
        return x + self.ffn(self.norm2(x)), registers


class IntrinsicAwareDecoder(Module):
    def __init__(self, dim: int, num_heads: int, blocks: int, window_size: int, rng):
        self.window_size = window_size
        self.blocks = ModuleList([IADBlock(dim, num_heads, rng) for _ in range(blocks)])
        self.out_norm = RMSNorm(dim)

    def forward(self, x: Tensor, registers: Tensor, coords: np.ndarray, grid_resolution: int) -> Tensor:
        groupings = {}
        for i, block in enumerate(self.blocks):
            shifted = i % 2 == 1
            if shifted not in groupings:
                groupings[shifted] = window_partition(
                    coords, grid_resolution, self.window_size, shifted
                ).groups
            x, registers = block(x, registers, groupings[shifted])
        return self.out_norm(x)


class LightingAwareDecoder(Module):
    def __init__(self, dim: int, token_dim: int, num_heads: int, blocks: int, rng, max_distance: float):
        self.view = ViewEmbedder(dim, rng, max_distance)
        self.blocks = ModuleList([LADBlock(dim, token_dim, num_heads, rng) for _ in range(blocks)])
        self.out_norm = RMSNorm(dim)

    def forward(self, h: Tensor, registers: Tensor, view: ViewEmbedding, tokens: Tensor, variant: str) -> Tensor:
        if h.shape[0] != view.e_dir.shape[0]:
            raise TensorError(f"view embedding has {view.e_dir.shape[0]} rows for {h.shape[0]} voxels")
        x = h + view.combined() if variant == "view_first" else h
        for block in self.blocks:
            x, registers = block(x, registers, tokens)
        if variant == "light_first":
            x = x + view.combined()
        return self.out_norm(x)


# ----------------------------------------------------------------------
# Heads
# ----------------------------------------------------------------------
class GaussianBundle:
    """
    voxel 당 K_g 개 Gaussian 의 활성화된 파라미터 (행 순서: voxel-major, child-minor)

    Attributes:
        means, offsets, basecolor, roughness, metallic, scales, rotations, opacity:
            intrinsic 파라미터 (Tensor)
        color_features, light_scales, shadow, normals: lighting 파라미터 (decode_lighting 이후)
    """

    def __init__(self, **fields):
        self.color_features: Optional[Tensor] = None
        self.light_scales: Optional[Tensor] = None
        self.shadow: Optional[Tensor] = None
        self.normals: Optional[Tensor] = None
        self.radiance: Optional[Tensor] = None
        for name, value in fields.items():
            setattr(self, name, value)

    def __len__(self) -> int:
        return self.means.shape[0]

    def to_gaussians(self, shadow_strength: float = 0.0) -> GaussianSet:
        if self.radiance is None or self.shadow is None:
            raise TensorError("bundle has no lighting branch; call decode_lighting first")
        radiance = self.radiance
        if shadow_strength:
            radiance = radiance * reshape(1.0 - self.shadow * shadow_strength, (-1, 1))
        return GaussianSet(
            means=self.means,
            scales=self.scales,
            rotations=self.rotations,
            opacity=self.opacity,
            radiance=radiance,
            basecolor=self.basecolor,
            roughness=self.roughness,
            metallic=self.metallic,
            shadow=self.shadow,
        )


def _split_children(x: Tensor, children: int, channels: int) -> Tensor:
    return reshape(x, (x.shape[0] * children, channels))


def _normalize_rows(x: Tensor) -> Tensor:
    return x / sqrt(tsum(x * x, axis=1, keepdims=True))


def decode_intrinsic(
    raw: TensorLike, coords: np.ndarray, grid_resolution: int, children: int
) -> GaussianBundle:
    """
    intrinsic head 출력 (L, K_g·16) 에 활성화를 적용

    center = p_center + tanh(o)·(0.5/N), scale = softplus·(0.5/N),
    rotation = normalize(raw + (1,0,0,0)), 나머지는 sigmoid / tanh.
    """
    raw = _split_children(as_tensor(raw), children, INTRINSIC_CHANNELS)
    half_voxel = 0.5 / grid_resolution
    centers = np.repeat(voxel_centers(coords, grid_resolution), children, axis=0)
    offsets = tanh(raw[:, 0:3]) * half_voxel
    identity = np.array([1.0, 0.0, 0.0, 0.0], dtype=raw.dtype)
    return GaussianBundle(
        means=offsets + centers.astype(raw.dtype),
        offsets=offsets,
        basecolor=sigmoid(raw[:, 3:6]),
        roughness=sigmoid(raw[:, 6]),
        metallic=sigmoid(raw[:, 7]),
        scales=softplus(raw[:, 8:11]) * half_voxel,
        rotations=_normalize_rows(raw[:, 11:15] + identity),
        opacity=tanh(raw[:, 15]),
    )


def shortest_axis_normals(
    light_scales: TensorLike, rotations: TensorLike, means: np.ndarray, camera_position: np.ndarray
) -> Tensor:
    """
    ŝ 의 최소 성분 축(동률이면 낮은 축 번호)을 r 로 회전한 world normal,
    카메라를 향하도록 부호를 뒤집음
    """
    light_scales = as_tensor(light_scales)
    axis = np.argmin(light_scales.data, axis=1)
    onehot = np.eye(3, dtype=light_scales.dtype)[axis]
    R = quaternion_to_matrix(rotations)
    normals = tsum(R * onehot[:, None, :], axis=2)
    view = np.asarray(means, dtype=np.float64) - camera_position
    facing = np.sum(normals.data * view, axis=1)
    sign = np.where(facing > 0.0, -1.0, 1.0).astype(light_scales.dtype)
    return normals * sign[:, None]


class RadianceHead(Module):
    """(sinusoidal(normal), f) → elu(·)+1 ≥ 0"""

    def __init__(self, rng: np.random.Generator, hidden: int = 64):
        in_dim = 2 * NORMAL_FREQUENCIES * 3 + COLOR_FEATURE_DIM
        self.mlp = MLP([in_dim, hidden, hidden, 3], rng)

    def forward(self, normals: TensorLike, features: TensorLike) -> Tensor:
        features = as_tensor(features)
        encoded = F.sinusoidal_encode(as_tensor(normals), NORMAL_FREQUENCIES)
        return elu(self.mlp(concat([encoded, features], axis=1))) + 1.0


class DecoderHeads(Module):
    def __init__(self, dim: int, children: int, rng: np.random.Generator, radiance_hidden: int = 64):
        self.intrinsic = Linear(dim, children * INTRINSIC_CHANNELS, rng)
        self.lighting = Linear(dim, children * LIGHTING_CHANNELS, rng)
        self.radiance = RadianceHead(rng, radiance_hidden)


def decode_lighting(
    raw: TensorLike,
    bundle: GaussianBundle,
    grid_resolution: int,
    camera: Camera,
    children: int,
) -> GaussianBundle:
    """lighting head 출력 (L, K_g·52) → f, ŝ = softplus·(0.5/N), σ = sigmoid, normal"""
    raw = _split_children(as_tensor(raw), children, LIGHTING_CHANNELS)
    bundle.color_features = raw[:, :COLOR_FEATURE_DIM]
    bundle.light_scales = softplus(raw[:, COLOR_FEATURE_DIM : COLOR_FEATURE_DIM + 3]) * (
        0.5 / grid_resolution
    )
    bundle.shadow = sigmoid(raw[:, COLOR_FEATURE_DIM + 3])
    bundle.normals = shortest_axis_normals(
        bundle.light_scales, bundle.rotations, bundle.means.data, camera.position
    )
    return bundle


# ----------------------------------------------------------------------
# Full decoder
# ----------------------------------------------------------------------
def decoder_input_dim(variant: str, feature_dim: int, basecolor_dim: int) -> int:
    if variant not in DECODER_INPUTS:
        raise ConfigError(f"Unknown decoder input '{variant}', expected one of {DECODER_INPUTS}")
    return {
        "lh": feature_dim,
        "shaded": feature_dim,
        "basecolor": basecolor_dim,
        "lh_basecolor": feature_dim + basecolor_dim,
    }[variant]


def decoder_input_features(
    variant: str, lh: Optional[Slat] = None, shaded: Optional[Slat] = None
) -> np.ndarray:
    """
    decoder 입력 SLAT 채널 선택

    Raises:
        ConfigError: 필요한 latent 가 없는 경우
    """
    if variant == "shaded":
        if shaded is None:
            raise ConfigError("decoder input 'shaded' requires a shaded latent")
        return shaded.feats
    if lh is None:
        raise ConfigError(f"decoder input '{variant}' requires a homogenized latent")
    if variant == "lh":
        return lh.feats
    if lh.basecolor_feats is None:
        raise ConfigError(f"decoder input '{variant}' requires basecolor features")
    if variant == "basecolor":
        return lh.basecolor_feats
    return np.concatenate([lh.feats, lh.basecolor_feats], axis=1)


class DecodedView:
    """한 시점/조명에 대한 decoder 출력"""

    def __init__(self, bundle: GaussianBundle, gaussians: GaussianSet, view: ViewEmbedding):
        self.bundle = bundle
        self.gaussians = gaussians
        self.view = view


class NearDecoder(Module):
    """
    Args:
        feature_dim, basecolor_dim: SLAT 채널 수
        dim: 내부 폭 D
        iad_blocks, lad_blocks: 깊이 (iad_blocks 는 0 가능)
        children: voxel 당 Gaussian 수 K_g
        lad_variant: view_first | light_first
        decoder_input: lh | shaded | basecolor | lh_basecolor
        shadow_strength: radiance 에 곱할 (1 − σ·strength) 의 strength
        tokenizer_kwargs: LightingTokenizer 인자
    """

    def __init__(
        self,
        rng: np.random.Generator,
        feature_dim: int,
        basecolor_dim: int,
        grid_resolution: int,
        dim: int = 64,
        num_heads: int = 4,
        iad_blocks: int = 12,
        lad_blocks: int = 6,
        window_size: int = 4,
        children: int = 4,
        lad_variant: str = "view_first",
        decoder_input: str = "lh_basecolor",
        shadow_strength: float = 0.0,
        max_distance: float = 6.0,
        tokenizer_kwargs: Optional[Dict] = None,
    ):
        if lad_variant not in LAD_VARIANTS:
            raise ConfigError(f"Unknown LAD variant '{lad_variant}', expected one of {LAD_VARIANTS}")
        if iad_blocks < 0 or lad_blocks < 1 or children < 1:
            raise ConfigError("decoder needs iad_blocks >= 0, lad_blocks >= 1 and children >= 1")
        self.grid_resolution = grid_resolution
        self.children = children
        self.lad_variant = lad_variant
        self.decoder_input = decoder_input
        self.shadow_strength = float(shadow_strength)

        self.input = Linear(decoder_input_dim(decoder_input, feature_dim, basecolor_dim), dim, rng)
        self.tokenizer = LightingTokenizer(rng, **(tokenizer_kwargs or {}))
        token_dim = self.tokenizer.dim
        self.registers = RegisterTokens(dim, rng)
        self.iad = IntrinsicAwareDecoder(dim, num_heads, iad_blocks, window_size, rng)
        self.lad = LightingAwareDecoder(dim, token_dim, num_heads, lad_blocks, rng, max_distance)
        self.heads = DecoderHeads(dim, children, rng)

    # ------------------------------------------------------------------
    def iad_forward(self, features: np.ndarray, coords: np.ndarray) -> Tensor:
        """SLAT 입력 → 조명 불변 intrinsic feature h (L, D)"""
        x = self.input(as_tensor(np.asarray(features).astype(self.input.weight.dtype)))
        return self.iad(x, self.registers.iad, coords, self.grid_resolution)

    def view_embedding(self, coords: np.ndarray, camera: Camera) -> ViewEmbedding:
        return self.lad.view(coords, self.grid_resolution, camera)

    def light_tokens(self, triplet: EnvTriplet) -> Tensor:
        return self.tokenizer(triplet)

    def lad_forward(self, h: Tensor, view: ViewEmbedding, tokens: Tensor) -> Tensor:
        return self.lad(h, self.registers.lad, view, tokens, self.lad_variant)

    def decode(
        self,
        h: Tensor,
        coords: np.ndarray,
        camera: Camera,
        tokens: Tensor,
    ) -> DecodedView:
        """IAD 출력 h 와 카메라/조명 token 으로 렌더링 가능한 Gaussian 생성"""
        view = self.view_embedding(coords, camera)
        h_e = self.lad_forward(h, view, tokens)
        bundle = decode_intrinsic(self.heads.intrinsic(h), coords, self.grid_resolution, self.children)
        bundle = decode_lighting(
            self.heads.lighting(h_e), bundle, self.grid_resolution, camera, self.children
        )
        bundle.radiance = self.heads.radiance(bundle.normals, bundle.color_features)
        return DecodedView(bundle, bundle.to_gaussians(self.shadow_strength), view)

    def forward(
        self, features: np.ndarray, coords: np.ndarray, camera: Camera, triplet: EnvTriplet
    ) -> DecodedView:
        h = self.iad_forward(features, coords)
        return self.decode(h, coords, camera, self.light_tokens(triplet))

    # ------------------------------------------------------------------
    def checkpoint_state(self) -> Dict[str, np.ndarray]:
        """'iad.blocks.0...' → 'iad/blocks.0...'"""
        return {name.replace(".", "/", 1): value for name, value in self.state_dict().items()}

    def load_checkpoint_state(self, tensors: Dict[str, np.ndarray], strict: bool = True) -> None:
        state = {
            name.replace("/", ".", 1): value
            for name, value in tensors.items()
            if not name.startswith(("optim/", "train/"))
        }
        self.load_state_dict(state, strict=strict)
