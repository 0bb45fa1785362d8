"""
해석적 shading oracle

Lambertian diffuse + normalized Blinn-Phong specular 를 환경맵의 이산 합으로
적분합니다. 그림자는 환경 방향별 SDF ray occlusion 으로 계산합니다.

    F0       = lerp(0.04·specular_weight, albedo, metallic)
    diffuse  = (1 − metallic)·albedo/π · Σ L·V·cos·dω
    specular = F0 · Σ L·V·cos·dω · (n_s + 2)/(2π)·(n·h)^{n_s},   n_s = 2/roughness² − 2
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from near.core.errors import ConfigError
from near.lighting.envmap import EnvMap, pool_envmap, solid_angle_weights, world_directions
from near.oracle.scene import SurfelScene, sphere_trace
from near.render.camera import Camera

logger = logging.getLogger(__name__)

DEFAULT_ORACLE_ENV_HEIGHT = 16
LUMINANCE = np.array([0.2126, 0.7152, 0.0722])
ORACLE_MAPS = ("hdr", "alpha", "basecolor", "roughness", "metallic", "shadow", "depth", "normal")


class HomogenizedLight:
    """균일한 흰색 ambient 조명 E0"""

    def __init__(self, e0: float = 1.0):
        if not e0 > 0.0:
            raise ConfigError(f"homogenized light intensity must be positive, got {e0}")
        self.e0 = float(e0)


class PooledEnv:
    """shading 에 쓰는 축소된 환경맵: 방향 J 개의 radiance / direction / solid angle"""

    def __init__(self, env: EnvMap, height: int = DEFAULT_ORACLE_ENV_HEIGHT):
        height = min(height, env.height)
        radiance, dirs, weights = pool_envmap(env, height)
        self.radiance = radiance.reshape(-1, 3)
        self.directions = dirs.reshape(-1, 3)
        self.weights = weights.reshape(-1)


class OracleFrame:
    """oracle 렌더 결과. 모든 map 은 numpy float64 (H, W[, 3])"""

    def __init__(self, **maps: np.ndarray):
        for name in ORACLE_MAPS:
            setattr(self, name, maps[name])

    def maps(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ORACLE_MAPS}


def env_irradiance(env: EnvMap, normal: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """
    E(n) = Σ_pixels L(ω)·max(0, n·ω)·dω

    Args:
        normal: (3,) 또는 (N, 3) 단위 법선

    Returns:
        (3,) 또는 (N, 3) RGB irradiance
    """
    normal = np.asarray(normal, dtype=np.float64)
    single = normal.ndim == 1
    normals = normal.reshape(-1, 3)
    dirs = world_directions(env.height, env.width).reshape(-1, 3)
    weighted = env.radiance.reshape(-1, 3) * solid_angle_weights(env.height, env.width).reshape(-1, 1)
    out = np.zeros((normals.shape[0], 3))
    for start in range(0, normals.shape[0], chunk):
        cos = np.maximum(normals[start : start + chunk] @ dirs.T, 0.0)
        out[start : start + chunk] = cos @ weighted
    return out[0] if single else out


def blinn_phong_exponent(roughness: np.ndarray) -> np.ndarray:
    roughness = np.maximum(np.asarray(roughness, dtype=np.float64), 1e-3)
    return 2.0 / (roughness * roughness) - 2.0


def shade_surfels(
    normals: np.ndarray,
    albedo: np.ndarray,
    roughness: np.ndarray,
    metallic: np.ndarray,
    view_dirs: np.ndarray,
    env: PooledEnv,
    occluded: Optional[np.ndarray] = None,
    specular_weight: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    surfel 묶음 shading

    Args:
        normals, albedo, view_dirs: (S, 3). view_dirs 는 surfel → 카메라 단위 벡터
        roughness, metallic: (S,)
        occluded: (S, J) bool, None 이면 occlusion 없음

    Returns:
        (hdr (S, 3), shadow (S,)): shadow 는 luminance 가중 가려진 비율
    """
    cos = np.maximum(normals @ env.directions.T, 0.0)
    visible = np.ones_like(cos) if occluded is None else 1.0 - occluded
    light = cos * env.weights[None, :]

    F0 = 0.04 * specular_weight * (1.0 - metallic[:, None]) + albedo * metallic[:, None]
    diffuse_weight = (1.0 - metallic[:, None]) * albedo / np.pi
    diffuse = diffuse_weight * ((light * visible) @ env.radiance)

    halfway = env.directions[None, :, :] + view_dirs[:, None, :]
    halfway /= np.maximum(np.linalg.norm(halfway, axis=-1, keepdims=True), 1e-12)
    n_dot_h = np.maximum(np.einsum("sjc,sc->sj", halfway, normals), 0.0)
    exponent = blinn_phong_exponent(roughness)[:, None]
    lobe = (exponent + 2.0) / (2.0 * np.pi) * n_dot_h**exponent
    specular = F0 * ((light * visible * lobe) @ env.radiance)

    lum = env.radiance @ LUMINANCE
    total = light @ lum
    blocked = (light * (1.0 - visible)) @ lum
    shadow = np.where(total > 0.0, blocked / np.where(total > 0.0, total, 1.0), 0.0)
    return diffuse + specular, shadow


def shade_surfel(
    position: np.ndarray,
    normal: np.ndarray,
    albedo: np.ndarray,
    roughness: float,
    metallic: float,
    view_dir: np.ndarray,
    env: EnvMap,
    scene: Optional[SurfelScene] = None,
    env_height: int = DEFAULT_ORACLE_ENV_HEIGHT,
    specular_weight: float = 0.0,
) -> np.ndarray:
    """단일 surfel 의 HDR radiance. scene 이 주어지면 그 SDF 로 그림자를 계산"""
    pooled = PooledEnv(env, env_height)
    normal = np.asarray(normal, dtype=np.float64).reshape(1, 3)
    occluded = None
    if scene is not None:
        occluded = scene.occlusion(np.asarray(position).reshape(1, 3), normal, pooled.directions)
    hdr, _ = shade_surfels(
        normal,
        np.asarray(albedo, dtype=np.float64).reshape(1, 3),
        np.array([roughness], dtype=np.float64),
        np.array([metallic], dtype=np.float64),
        np.asarray(view_dir, dtype=np.float64).reshape(1, 3),
        pooled,
        occluded,
        specular_weight,
    )
    return hdr[0]


# ----------------------------------------------------------------------
# Image rendering
# ----------------------------------------------------------------------
class _GBuffer:
    def __init__(self, scene: SurfelScene, camera: Camera):
        origin, dirs = camera.pixel_rays()
        h, w = camera.height, camera.width
        flat = dirs.reshape(-1, 3)
        far = float(np.linalg.norm(origin)) + 2.0
        hit, t = sphere_trace(scene.primitives, origin, flat, t_max=far)
        self.shape = (h, w)
        self.hit = hit
        self.ids = np.zeros(hit.shape[0], dtype=np.int64)
        if np.any(hit):
            points = origin + t[hit, None] * flat[hit]
            self.ids[hit] = scene.nearest_surfels(points)
        self.depth = np.zeros(hit.shape[0])
        if np.any(hit):
            self.depth[hit] = camera.world_to_camera(scene.positions[self.ids[hit]])[:, 2]
        self.camera = camera

    def image(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros((self.hit.shape[0],) + values.shape[1:])
        out[self.hit] = values
        return out.reshape(self.shape + values.shape[1:])


def _material_maps(scene: SurfelScene, gb: _GBuffer) -> Dict[str, np.ndarray]:
    ids = gb.ids[gb.hit]
    return {
        "alpha": gb.hit.reshape(gb.shape).astype(np.float64),
        "basecolor": gb.image(scene.albedo[ids]),
        "roughness": gb.image(scene.roughness[ids]),
        "metallic": gb.image(scene.metallic[ids]),
        "depth": gb.depth.reshape(gb.shape),
        "normal": gb.image(scene.normals[ids]),
    }


def render_reference(
    scene: SurfelScene,
    camera: Camera,
    env: EnvMap,
    env_height: int = DEFAULT_ORACLE_ENV_HEIGHT,
    specular_weight: float = 0.0,
    chunk: int = 2048,
) -> OracleFrame:
    """
    SDF sphere tracing 으로 픽셀별 최근접 surfel 을 찾고 shade_surfel 로 shading

    aux map 은 surfel material 값을 그대로 기록합니다 (shading 없음).
    """
    gb = _GBuffer(scene, camera)
    maps = _material_maps(scene, gb)
    ids = gb.ids[gb.hit]
    if ids.size == 0:
        maps["hdr"] = np.zeros(gb.shape + (3,))
        maps["shadow"] = np.zeros(gb.shape)
        return OracleFrame(**maps)

    pooled = PooledEnv(env, env_height)
    occluded = scene.visibility(pooled.directions)
    view = camera.position - scene.positions[ids]
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    hdr = np.zeros((ids.size, 3))
    shadow = np.zeros(ids.size)
    for start in range(0, ids.size, chunk):
        sl = slice(start, start + chunk)
        rows = ids[sl]
        hdr[sl], shadow[sl] = shade_surfels(
            scene.normals[rows],
            scene.albedo[rows],
            scene.roughness[rows],
            scene.metallic[rows],
            view[sl],
            pooled,
            occluded[rows],
            specular_weight,
        )
    maps["hdr"] = gb.image(hdr)
    maps["shadow"] = gb.image(shadow)
    return OracleFrame(**maps)


def render_homogenized(
    scene: SurfelScene,
    camera: Camera,
    light: Optional[HomogenizedLight] = None,
    specular_weight: float = 0.0,
) -> OracleFrame:
    """
    균일 ambient 조명 아래의 렌더: E0·albedo·(1 − metallic) + E0·F0

    E0·F0 는 flat specular floor 입니다 (F0 는 shade_surfels 와 같음).
    occlusion 과 그림자는 적용하지 않으므로 시점에 무관합니다.
    """
    light = light or HomogenizedLight()
    gb = _GBuffer(scene, camera)
    maps = _material_maps(scene, gb)
    ids = gb.ids[gb.hit]
    albedo = scene.albedo[ids]
    metallic = scene.metallic[ids][:, None]
    F0 = 0.04 * specular_weight * (1.0 - metallic) + albedo * metallic
    hdr = light.e0 * albedo * (1.0 - metallic) + light.e0 * F0
    maps["hdr"] = gb.image(hdr)
    maps["shadow"] = np.zeros(gb.shape)
    return OracleFrame(**maps)
