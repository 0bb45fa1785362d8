"""
Equirectangular HDR 환경맵과 그 분해(EnvTriplet)

픽셀 (u, v) 의 구면 좌표는 φ = 2π(u+0.5)/W − π, θ = π(v+0.5)/H 이고
world 방향은 (sinθ·cosφ, cosθ, sinθ·sinφ) 입니다 (+Y 가 위).
"""

import logging
import math
from typing import Optional

import numpy as np

from near.core.errors import ConfigError, FormatError, GeometryError, NonFiniteError
from near.render.camera import is_orthonormal, rotation_y

logger = logging.getLogger(__name__)

ENV_KINDS = ("sky", "studio", "uniform", "six_lights", "hemisphere_lights")


class EnvMap:
    """
    Attributes:
        radiance: (H, W, 3) float64 선형 radiance, 유한하고 ≥ 0, W = 2H
    """

    def __init__(self, radiance: np.ndarray):
        radiance = np.asarray(radiance, dtype=np.float64)
        if radiance.ndim != 3 or radiance.shape[2] != 3:
            raise FormatError(f"environment map must be (H, W, 3), got {radiance.shape}")
        height, width = radiance.shape[:2]
        if height < 1 or width != 2 * height:
            raise FormatError(f"environment map must have W = 2H, got {height}x{width}")
        if not np.all(np.isfinite(radiance)):
            raise NonFiniteError("environment map contains NaN or Inf")
        if np.any(radiance < 0):
            raise FormatError("environment map radiance must be non-negative")
        self.radiance = radiance

    @property
    def height(self) -> int:
        return self.radiance.shape[0]

    @property
    def width(self) -> int:
        return self.radiance.shape[1]

    def __repr__(self) -> str:
        return f"EnvMap({self.height}x{self.width}, max={self.radiance.max():.3g})"


class EnvTriplet:
    """E_ldr, E_log ∈ [0,1], E_dir 단위 벡터 (카메라 좌표계), e_max 는 사용된 정규화 값"""

    def __init__(self, e_ldr: np.ndarray, e_log: np.ndarray, e_dir: np.ndarray, e_max: float):
        self.e_ldr = e_ldr
        self.e_log = e_log
        self.e_dir = e_dir
        self.e_max = float(e_max)

    def replace_dir(self, e_dir: np.ndarray) -> "EnvTriplet":
        return EnvTriplet(self.e_ldr, self.e_log, e_dir, self.e_max)


def pixel_angles(height: int, width: int):
    """(θ, φ) 각 (H, W)"""
    phi = 2.0 * np.pi * (np.arange(width) + 0.5) / width - np.pi
    theta = np.pi * (np.arange(height) + 0.5) / height
    return np.meshgrid(theta, phi, indexing="ij")


def world_directions(height: int, width: int) -> np.ndarray:
    theta, phi = pixel_angles(height, width)
    s = np.sin(theta)
    return np.stack([s * np.cos(phi), np.cos(theta), s * np.sin(phi)], axis=-1)


def solid_angle_weights(height: int, width: int) -> np.ndarray:
    """dω = sinθ·(π/H)·(2π/W) per pixel"""
    theta, _ = pixel_angles(height, width)
    return np.sin(theta) * (np.pi / height) * (2.0 * np.pi / width)


def direction_map(
    height: int, width: int, camera_rotation: Optional[np.ndarray] = None
) -> np.ndarray:
    """
    픽셀별 방향을 카메라 좌표계로 회전한 E_dir

    Args:
        height, width: W = 2H
        camera_rotation: world→camera 회전, None 이면 항등
    """
    if width != 2 * height:
        raise GeometryError(f"direction map requires W = 2H, got {height}x{width}")
    dirs = world_directions(height, width)
    if camera_rotation is not None:
        dirs = dirs @ np.asarray(camera_rotation, dtype=np.float64).T
    return dirs


def decompose(env: EnvMap, camera_rotation: Optional[np.ndarray] = None) -> EnvTriplet:
    """
    E_log = log(E+1)/log(E_max+1), E_ldr = E/(1+E), E_dir = direction_map

    모든 값이 0 인 맵은 E_log 를 0 으로 정의합니다.
    """
    radiance = env.radiance
    e_max = float(radiance.max())
    if e_max > 0.0:
        e_log = np.log1p(radiance) / math.log1p(e_max)
    else:
        e_log = np.zeros_like(radiance)
    e_ldr = radiance / (1.0 + radiance)
    e_dir = direction_map(env.height, env.width, camera_rotation)
    return EnvTriplet(e_ldr, e_log, e_dir, e_max)


def rotate_env(triplet: EnvTriplet, rotation: np.ndarray) -> EnvTriplet:
    """
    방향 맵만 d ← R·d 로 회전 (E_ldr / E_log 는 그대로)

    Raises:
        GeometryError: R 이 orthonormal 이 아닌 경우
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    if not is_orthonormal(rotation, tol=1e-6):
        raise GeometryError("rotate_env requires an orthonormal rotation")
    return triplet.replace_dir(triplet.e_dir @ rotation.T)


def rotate_envmap_yaw(env: EnvMap, angle_rad: float) -> EnvMap:
    """
    up 축 기준 yaw 회전으로 맵을 재샘플링

    decompose 후 rotate_env(rotation_y(angle)) 를 적용한 결과와 같은 조명을
    나타냅니다: 새 맵의 픽셀 ψ 는 원래 맵의 ψ + angle 위치 값을 가집니다.
    정수 픽셀 이동이면 정확하고, 아니면 선형 보간합니다.
    """
    shift = angle_rad / (2.0 * np.pi) * env.width
    base = math.floor(shift)
    frac = shift - base
    left = np.roll(env.radiance, -base, axis=1)
    if frac < 1e-12:
        return EnvMap(left)
    right = np.roll(env.radiance, -(base + 1), axis=1)
    return EnvMap((1.0 - frac) * left + frac * right)


def yaw_rotation(angle_rad: float) -> np.ndarray:
    """rotate_env 에서 φ → φ − angle 로 작용하는 회전"""
    return rotation_y(angle_rad)


def area_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """(H, W, C) → (H/f, W/f, C) 블록 평균"""
    if factor == 1:
        return image
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise GeometryError(f"cannot downsample {h}x{w} by {factor}")
    blocks = image.reshape(h // factor, factor, w // factor, factor, -1)
    return blocks.mean(axis=(1, 3))


def downsample_directions(e_dir: np.ndarray, factor: int) -> np.ndarray:
    pooled = area_downsample(e_dir, factor)
    norm = np.linalg.norm(pooled, axis=-1, keepdims=True)
    return pooled / np.maximum(norm, 1e-12)


def pool_envmap(env: EnvMap, height: int):
    """
    solid angle 가중 평균으로 환경맵을 (height, 2·height) 로 축소

    Returns:
        (radiance (h, w, 3), directions (h, w, 3), weights (h, w)).
        weights 는 원래 픽셀 solid angle 의 합이라 적분값이 보존됩니다.
    """
    if env.height % height:
        raise GeometryError(f"cannot pool {env.height} rows into {height}")
    factor = env.height // height
    w = solid_angle_weights(env.height, env.width)
    h2, w2 = height, 2 * height
    wb = w.reshape(h2, factor, w2, factor)
    rb = env.radiance.reshape(h2, factor, w2, factor, 3)
    weights = wb.sum(axis=(1, 3))
    radiance = (rb * wb[..., None]).sum(axis=(1, 3)) / np.maximum(weights, 1e-30)[..., None]
    return radiance, world_directions(h2, w2), weights


# ----------------------------------------------------------------------
# Procedural environments
# ----------------------------------------------------------------------
def _random_unit(rng: np.random.Generator, count: int) -> np.ndarray:
    v = rng.normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _fibonacci_sphere(count: int, rng: np.random.Generator) -> np.ndarray:
    i = np.arange(count) + 0.5
    y = 1.0 - 2.0 * i / count
    r = np.sqrt(1.0 - y * y)
    golden = np.pi * (3.0 - math.sqrt(5.0))
    phi = golden * i + rng.uniform(0, 2 * np.pi)
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def _add_disks(
    radiance: np.ndarray,
    dirs: np.ndarray,
    centers: np.ndarray,
    intensities: np.ndarray,
    angular_radius: float,
    colors: Optional[np.ndarray] = None,
) -> None:
    cos_r = math.cos(angular_radius)
    for i, center in enumerate(centers):
        inside = dirs @ center >= cos_r
        color = np.ones(3) if colors is None else colors[i]
        radiance[inside] += intensities[i] * color


def make_environment(
    seed: int,
    kind: str,
    height: int = 64,
    area_light_scale: float = 0.01,
    facing_direction: Optional[np.ndarray] = None,
    uniform_value: float = 1.0,
) -> EnvMap:
    """
    절차적 환경맵 생성

    Args:
        seed: 시드
        kind: sky | studio | uniform | six_lights | hemisphere_lights
        height: H (W = 2H)
        area_light_scale: disk 광원 세기 [300, 700] 에 곱할 스케일
        facing_direction: hemisphere_lights 에서 광원을 둘 반구의 축 (원점→카메라, world)
        uniform_value: uniform 맵의 값

    Raises:
        ConfigError: 알 수 없는 kind
    """
    rng = np.random.default_rng(seed)
    width = 2 * height
    dirs = world_directions(height, width)
    radiance = np.zeros((height, width, 3))

    if kind == "uniform":
        radiance[:] = uniform_value
    elif kind == "sky":
        up = dirs[..., 1:2]
        zenith = np.array([0.35, 0.55, 1.0]) * rng.uniform(0.6, 1.2)
        horizon = np.array([0.9, 0.85, 0.8]) * rng.uniform(0.6, 1.2)
        ground = np.array([0.25, 0.22, 0.2]) * rng.uniform(0.5, 1.0)
        sky = horizon + (zenith - horizon) * np.clip(up, 0.0, 1.0)
        radiance[:] = np.where(up >= 0.0, sky, ground)
        sun = _random_unit(rng, 1)
        sun[0, 1] = abs(sun[0, 1]) * 0.8 + 0.2
        sun /= np.linalg.norm(sun)
        _add_disks(radiance, dirs, sun, np.array([rng.uniform(20.0, 40.0)]), 0.08,
                   colors=np.array([[1.0, 0.95, 0.85]]))
    elif kind == "studio":
        count = int(rng.integers(2, 5))
        centers = _random_unit(rng, count)
        intensities = rng.uniform(300.0, 700.0, size=count) * area_light_scale
        colors = rng.uniform(0.7, 1.0, size=(count, 3))
        radiance[:] = 0.05
        _add_disks(radiance, dirs, centers, intensities, 0.3, colors)
    elif kind == "six_lights":
        centers = _fibonacci_sphere(6, rng)
        intensities = rng.uniform(300.0, 700.0, size=6) * area_light_scale
        _add_disks(radiance, dirs, centers, intensities, 0.25)
    elif kind == "hemisphere_lights":
        facing = np.array([0.0, 0.0, 1.0]) if facing_direction is None else np.asarray(facing_direction, dtype=np.float64)
        facing = facing / np.linalg.norm(facing)
        count = int(rng.integers(1, 4))
        centers = _random_unit(rng, count)
        flip = centers @ facing < 0.0
        centers[flip] *= -1.0
        intensities = rng.uniform(300.0, 700.0, size=count) * area_light_scale
        _add_disks(radiance, dirs, centers, intensities, 0.25)
    else:
        raise ConfigError(f"Unknown environment kind '{kind}', expected one of {ENV_KINDS}")
    return EnvMap(radiance)
