"""
Dataset 생성과 읽기

디렉터리 구조:

    <root>/run_config.env             유효 설정 전체
    <root>/manifest.json              모든 산출물의 sha256
    <root>/scene_000/scene.txt        장면 설명
    <root>/scene_000/slat_lh.slat     Z_lh (+ basecolor feature Z_bc)
    <root>/scene_000/slat_shaded.slat Z_s (미지 조명 아래)
    <root>/scene_000/condition.ckpt   입력 이미지 전역 condition 벡터
    <root>/scene_000/input_env.hdr    입력 view 의 미지 조명
    <root>/scene_000/input_00.pfm     입력 view HDR
    <root>/scene_000/envs/e00.hdr     supervision 환경맵
    <root>/scene_000/views/v00/gbuffer.ckpt        alpha/basecolor/roughness/metallic/depth/normal
    <root>/scene_000/views/v00/homogenized.pfm     균일 조명 렌더
    <root>/scene_000/views/v00/e00.pfm             HDR
    <root>/scene_000/views/v00/e00_shadow.pfm      shadow GT
"""

import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from near.core.debug import Debug
from near.core.errors import FormatError, GeometryError, NearError, TrainingError
from near.infra.artifacts import OutputLock, write_manifest
from near.infra.checkpoint import load_checkpoint, save_checkpoint
from near.infra.hdr_io import decode_radiance_hdr, encode_radiance_hdr, read_hdr, read_pfm, write_pfm
from near.infra.scene_file import read_scene_file, write_scene_file
from near.infra.slat_codec import load_slat, save_slat
from near.latent.slat import Slat, aggregate_features, voxelize_surface
from near.lighting.envmap import EnvMap, make_environment, rotate_envmap_yaw
from near.oracle.features import image_condition, render_features
from near.oracle.scene import SurfelScene, build_scene, describe_scene
from near.oracle.shading import HomogenizedLight, OracleFrame, render_homogenized, render_reference
from near.render.camera import Camera
from near.schemas.run_config import RunConfig

logger = logging.getLogger(__name__)

CONFIG_DUMP = "run_config.env"
GBUFFER_MAPS = ("alpha", "basecolor", "roughness", "metallic", "depth", "normal")
INPUT_ILLUMINATIONS = ("six_lights", "hemisphere_lights", "rotated")
FEATURE_SEED = 7


# ----------------------------------------------------------------------
# 결정적 카메라 / 조명
# ----------------------------------------------------------------------
def scene_seed(config: RunConfig, index: int) -> int:
    return config.seed * 1000 + index


def supervision_cameras(config: RunConfig) -> List[Camera]:
    """궤도를 고르게 도는 supervision 시점 (pitch 0/20/40 순환)"""
    count = config.supervision_views
    return [
        Camera.orbit(
            360.0 * i / count,
            (0.0, 20.0, 40.0)[i % 3],
            config.camera_radius,
            config.fov_deg,
            config.image_size,
            config.image_size,
        )
        for i in range(count)
    ]


def aggregation_cameras(config: RunConfig) -> List[Camera]:
    """SLAT back-projection 용 시점 (위/아래 번갈아)"""
    count = config.aggregation_views
    return [
        Camera.orbit(
            360.0 * (i + 0.5) / count,
            35.0 if i % 2 == 0 else -5.0,
            config.camera_radius,
            config.fov_deg,
            config.image_size,
            config.image_size,
        )
        for i in range(count)
    ]


def input_cameras(config: RunConfig, index: int) -> List[Camera]:
    """미지 조명 입력 view: yaw ±input_yaw_deg, pitch [min, max] 에서 균등 추출"""
    rng = np.random.default_rng([scene_seed(config, index), 1])
    cameras = []
    for _ in range(config.input_views):
        yaw = rng.uniform(-config.input_yaw_deg, config.input_yaw_deg)
        pitch = rng.uniform(config.input_pitch_min_deg, config.input_pitch_max_deg)
        cameras.append(
            Camera.orbit(yaw, pitch, config.camera_radius, config.fov_deg, config.image_size, config.image_size)
        )
    return cameras


def quantize_env(env: EnvMap) -> EnvMap:
    """RGBE 저장 후 다시 읽은 것과 같은 값 (렌더와 파일이 일치하도록)"""
    return EnvMap(decode_radiance_hdr(encode_radiance_hdr(env.radiance)))


def _random_yaw(rng: np.random.Generator, width: int) -> float:
    return 2.0 * np.pi * int(rng.integers(0, width)) / width


def supervision_environment(config: RunConfig, index: int, env_index: int) -> EnvMap:
    """env_kinds 를 순환하며 whole-pixel yaw 회전을 무작위로 적용"""
    seed = scene_seed(config, index) * 100 + env_index
    kind = config.env_kinds[env_index % len(config.env_kinds)]
    env = make_environment(seed, kind, config.env_height, config.area_light_scale)
    rng = np.random.default_rng([seed, 2])
    return quantize_env(rotate_envmap_yaw(env, _random_yaw(rng, env.width)))


def input_environment(config: RunConfig, index: int, camera: Camera) -> EnvMap:
    """
    입력 view 조명 (장면 번호에 따라 순환):
    구 위 6 개 disk / 카메라 쪽 반구의 1–3 개 disk / yaw 회전된 환경맵
    """
    seed = scene_seed(config, index) * 100 + 99
    mode = INPUT_ILLUMINATIONS[index % len(INPUT_ILLUMINATIONS)]
    if mode == "six_lights":
        env = make_environment(seed, "six_lights", config.env_height, config.area_light_scale)
    elif mode == "hemisphere_lights":
        env = make_environment(
            seed, "hemisphere_lights", config.env_height, config.area_light_scale,
            facing_direction=camera.position,
        )
    else:
        rng = np.random.default_rng([seed, 3])
        kind = config.env_kinds[int(rng.integers(0, len(config.env_kinds)))]
        env = make_environment(seed, kind, config.env_height, config.area_light_scale)
        env = rotate_envmap_yaw(env, _random_yaw(rng, env.width))
    return quantize_env(env)


# ----------------------------------------------------------------------
# SLAT 구성
# ----------------------------------------------------------------------
def _feature_views(frames: List[OracleFrame], config: RunConfig):
    feats, bcs, covs = [], [], []
    for frame in frames:
        f, bc, cov = render_features(frame, config.feature_dim, config.basecolor_dim, FEATURE_SEED)
        feats.append(f)
        bcs.append(bc)
        covs.append(cov)
    return feats, bcs, covs


def homogenized_latent(scene: SurfelScene, config: RunConfig) -> Slat:
    """oracle geometry 를 균일 조명으로 렌더해 Z_lh (+ Z_bc) 구성"""
    n = config.grid_resolution
    coords = voxelize_surface(scene.positions, n)
    cameras = aggregation_cameras(config)
    light = HomogenizedLight(config.homogenized_e0)
    homogenized = [render_homogenized(scene, cam, light, config.specular_weight) for cam in cameras]
    feats, bcs, covs = _feature_views(homogenized, config)
    return aggregate_features(feats, cameras, coords, n, covs, bcs)


def build_latents(
    scene: SurfelScene,
    config: RunConfig,
    input_env: EnvMap,
    inputs: List[Camera],
) -> Tuple[Slat, Slat, np.ndarray, List[OracleFrame]]:
    """
    Returns:
        (Z_lh + Z_bc, Z_s + 입력 조명 아래의 Z_bc, 이미지 condition (D,), 입력 view oracle 프레임)
    """
    n = config.grid_resolution
    cameras = aggregation_cameras(config)
    slat_lh = homogenized_latent(scene, config)

    shaded = [
        render_reference(scene, cam, input_env, config.oracle_env_height, config.specular_weight)
        for cam in cameras
    ]
    feats, bcs, covs = _feature_views(shaded, config)
    slat_shaded = aggregate_features(feats, cameras, slat_lh.coords, n, covs, bcs)

    input_frames = [
        render_reference(scene, cam, input_env, config.oracle_env_height, config.specular_weight)
        for cam in inputs
    ]
    feats, _, covs = _feature_views(input_frames, config)
    condition = np.mean([image_condition(f, c) for f, c in zip(feats, covs)], axis=0)
    return slat_lh, slat_shaded, condition, input_frames


# ----------------------------------------------------------------------
# 생성 서비스
# ----------------------------------------------------------------------
def scene_dir_name(index: int) -> str:
    return f"scene_{index:03d}"


class DatasetService:
    def __init__(self, config: RunConfig, root: str):
        """
        Args:
            config: 실험 설정
            root: 출력 디렉터리 (없으면 생성)
        """
        self.config = config
        self.root = root

    @Debug
    def generate(self) -> Dict[str, object]:
        """
        모든 장면의 GT 렌더, 균일 조명 렌더, SLAT, 입력 view 를 기록하고 manifest 작성

        Raises:
            TrainingError: 출력 디렉터리가 lock 된 경우
            NearError: 장면/렌더 오류
        """
        with OutputLock(self.root):
            self.config.dump(os.path.join(self.root, CONFIG_DUMP))
            for index in tqdm(range(self.config.scene_count), desc="scenes"):
                try:
                    self._write_scene(index)
                except NearError as e:
                    logger.error(f"Failed to generate scene {index}: {e}")
                    raise
            manifest = write_manifest(self.root, self.config.seed)
        logger.info(
            f"Dataset written to {self.root}: {self.config.scene_count} scenes, "
            f"{len(manifest.entries)} artifacts"
        )
        return {"root": self.root, "scenes": self.config.scene_count, "artifacts": len(manifest.entries)}

    def _write_scene(self, index: int) -> None:
        config = self.config
        directory = os.path.join(self.root, scene_dir_name(index))
        os.makedirs(os.path.join(directory, "envs"), exist_ok=True)

        description = describe_scene(scene_seed(config, index), config.scene_kind_for(index), config.surfel_budget)
        write_scene_file(os.path.join(directory, "scene.txt"), description)
        scene = build_scene(description)

        inputs = input_cameras(config, index)
        input_env = input_environment(config, index, inputs[0])
        with open(os.path.join(directory, "input_env.hdr"), "wb") as f:
            f.write(encode_radiance_hdr(input_env.radiance))

        slat_lh, slat_shaded, condition, input_frames = build_latents(scene, config, input_env, inputs)
        save_slat(os.path.join(directory, "slat_lh.slat"), slat_lh)
        save_slat(os.path.join(directory, "slat_shaded.slat"), slat_shaded)
        save_checkpoint(os.path.join(directory, "condition.ckpt"), {"condition": condition})
        for i, frame in enumerate(input_frames):
            write_pfm(os.path.join(directory, f"input_{i:02d}.pfm"), frame.hdr)

        envs = [supervision_environment(config, index, j) for j in range(config.supervision_envs)]
        for j, env in enumerate(envs):
            with open(os.path.join(directory, "envs", f"e{j:02d}.hdr"), "wb") as f:
                f.write(encode_radiance_hdr(env.radiance))

        light = HomogenizedLight(config.homogenized_e0)
        for v, camera in enumerate(supervision_cameras(config)):
            view_dir = os.path.join(directory, "views", f"v{v:02d}")
            os.makedirs(view_dir, exist_ok=True)
            homogenized = render_homogenized(scene, camera, light, config.specular_weight)
            save_checkpoint(
                os.path.join(view_dir, "gbuffer.ckpt"),
                {name: getattr(homogenized, name) for name in GBUFFER_MAPS},
            )
            write_pfm(os.path.join(view_dir, "homogenized.pfm"), homogenized.hdr)
            for j, env in enumerate(envs):
                frame = render_reference(scene, camera, env, config.oracle_env_height, config.specular_weight)
                write_pfm(os.path.join(view_dir, f"e{j:02d}.pfm"), frame.hdr)
                write_pfm(os.path.join(view_dir, f"e{j:02d}_shadow.pfm"), frame.shadow)
        logger.info(f"Scene {index} ({description.kind}): {slat_lh.num_tokens} voxels, {scene.surfel_count} surfels")


# ----------------------------------------------------------------------
# 읽기
# ----------------------------------------------------------------------
class SceneData:
    """한 장면의 학습 입력 (지연 로딩되는 GT 프레임 포함)"""

    def __init__(self, dataset: "Dataset", index: int):
        self.dataset = dataset
        self.index = index
        self.directory = os.path.join(dataset.root, scene_dir_name(index))
        self.description = read_scene_file(os.path.join(self.directory, "scene.txt"))
        self.slat_lh = load_slat(os.path.join(self.directory, "slat_lh.slat"))
        self.slat_shaded = load_slat(os.path.join(self.directory, "slat_shaded.slat"))
        self.condition = load_checkpoint(os.path.join(self.directory, "condition.ckpt"))["condition"]
        self._envs: Dict[int, EnvMap] = {}
        self._gbuffers: Dict[int, Dict[str, np.ndarray]] = {}

    def scene(self) -> SurfelScene:
        return build_scene(self.description)

    def env(self, env_index: int) -> EnvMap:
        if env_index not in self._envs:
            path = os.path.join(self.directory, "envs", f"e{env_index:02d}.hdr")
            self._envs[env_index] = EnvMap(read_hdr(path))
        return self._envs[env_index]

    def input_env(self) -> EnvMap:
        return EnvMap(read_hdr(os.path.join(self.directory, "input_env.hdr")))

    def input_image(self, view: int = 0) -> np.ndarray:
        return read_pfm(os.path.join(self.directory, f"input_{view:02d}.pfm"))

    def gbuffer(self, view: int) -> Dict[str, np.ndarray]:
        if view not in self._gbuffers:
            path = os.path.join(self.directory, "views", f"v{view:02d}", "gbuffer.ckpt")
            self._gbuffers[view] = load_checkpoint(path)
        return self._gbuffers[view]

    def target(self, view: int, env_index: int) -> Dict[str, np.ndarray]:
        """(view, env) 의 GT map: hdr, shadow 와 g-buffer"""
        view_dir = os.path.join(self.directory, "views", f"v{view:02d}")
        maps = dict(self.gbuffer(view))
        maps["hdr"] = read_pfm(os.path.join(view_dir, f"e{env_index:02d}.pfm"))
        maps["shadow"] = read_pfm(os.path.join(view_dir, f"e{env_index:02d}_shadow.pfm"))
        return maps

    def homogenized(self, view: int) -> np.ndarray:
        return read_pfm(os.path.join(self.directory, "views", f"v{view:02d}", "homogenized.pfm"))


class Dataset:
    """
    Raises:
        TrainingError: 디렉터리나 설정 dump 가 없는 경우
    """

    def __init__(self, root: str, config: Optional[RunConfig] = None):
        if not os.path.isdir(root):
            raise TrainingError(f"Dataset directory not found: {root}")
        dump = os.path.join(root, CONFIG_DUMP)
        if config is None:
            if not os.path.exists(dump):
                raise TrainingError(f"{root} has no {CONFIG_DUMP}; run 'near gen' first")
            config = RunConfig.from_file(dump)
        self.root = root
        self.config = config
        self.cameras = supervision_cameras(config)
        self._scenes: Dict[int, SceneData] = {}

    def __len__(self) -> int:
        return self.config.scene_count

    def scene(self, index: int) -> SceneData:
        if not 0 <= index < len(self):
            raise TrainingError(f"scene index {index} outside [0, {len(self)})")
        if index not in self._scenes:
            try:
                self._scenes[index] = SceneData(self, index)
            except (OSError, FormatError, GeometryError) as e:
                logger.error(f"Cannot load scene {index} from {self.root}: {e}")
                raise TrainingError(f"scene {index} is missing or corrupt: {e}") from e
        return self._scenes[index]
