"""
학습된 decoder (+ flow) 로 이미지 렌더

모드:
    gbuffer      oracle geometry → Z_lh → decode (flow 생략)
    reconstruct  입력 조명 아래의 Z_s 를 homogenize 한 뒤 입력 조명/입력 시점으로 렌더
    relight      reconstruct 와 같은 latent, 새 환경맵
    novel-view   reconstruct 와 같은 latent, 새 카메라 + 환경맵

출력: <out>.png (AgX), <out>_hdr.pfm, 그리고 aux map (<out>_basecolor.png 등)
"""

import logging
import os
from typing import Dict, Optional

import numpy as np

from near.core.debug import Debug
from near.core.errors import ConfigError, TrainingError
from near.infra.hdr_io import write_pfm
from near.infra.image_io import write_hdr_png, write_png
from near.infra.scene_file import read_scene_file
from near.latent.slat import Slat
from near.lighting.envmap import EnvMap, make_environment
from near.models.flow import homogenize
from near.oracle.scene import build_scene
from near.render.camera import Camera
from near.schemas.run_config import RunConfig
from near.services.dataset import (
    Dataset,
    build_latents,
    homogenized_latent,
    input_cameras,
    input_environment,
    supervision_cameras,
)
from near.services.decoder import DECODER_CHECKPOINT, load_decoder, render_view, scene_features
from near.services.flow import FLOW_CHECKPOINT, load_flow

logger = logging.getLogger(__name__)

RENDER_MODES = ("gbuffer", "reconstruct", "relight", "novel-view")
LDR_MAPS = ("basecolor", "roughness", "metallic", "shadow", "alpha")


def resolve_checkpoint(path: str, name: str) -> str:
    """디렉터리가 주어지면 그 안의 name 파일"""
    return os.path.join(path, name) if os.path.isdir(path) else path


class SceneInputs:
    """
    렌더에 필요한 장면 입력

    Attributes:
        slat_lh: oracle Z_lh (+ Z_bc), gbuffer 모드 입력
        slat_shaded: 입력 조명 아래의 Z_s (+ Z_bc)
        condition: 입력 이미지 condition 벡터
        input_env: 입력 view 의 조명
        input_camera: 첫 번째 입력 view 카메라
    """

    def __init__(
        self,
        slat_lh: Slat,
        slat_shaded: Slat,
        condition: np.ndarray,
        input_env: EnvMap,
        input_camera: Camera,
    ):
        self.slat_lh = slat_lh
        self.slat_shaded = slat_shaded
        self.condition = condition
        self.input_env = input_env
        self.input_camera = input_camera

    @classmethod
    def from_dataset(cls, dataset: Dataset, index: int) -> "SceneInputs":
        scene = dataset.scene(index)
        return cls(
            scene.slat_lh,
            scene.slat_shaded,
            scene.condition,
            scene.input_env(),
            input_cameras(dataset.config, index)[0],
        )

    @classmethod
    def from_scene_file(cls, path: str, config: RunConfig) -> "SceneInputs":
        """장면 파일을 장면 번호 0 의 입력 조명/카메라로 준비"""
        scene = build_scene(read_scene_file(path))
        inputs = input_cameras(config, 0)
        env = input_environment(config, 0, inputs[0])
        slat_lh, slat_shaded, condition, _ = build_latents(scene, config, env, inputs)
        return cls(slat_lh, slat_shaded, condition, env, inputs[0])

    @classmethod
    def from_geometry(cls, path: str, config: RunConfig) -> "SceneInputs":
        """gbuffer 모드 전용: Z_lh 만 계산"""
        scene = build_scene(read_scene_file(path))
        slat_lh = homogenized_latent(scene, config)
        camera = supervision_cameras(config)[0]
        env = make_environment(config.seed, "uniform", height=config.env_height)
        return cls(slat_lh, slat_lh, np.zeros(config.feature_dim), env, camera)


class RenderService:
    def __init__(self, config: RunConfig, checkpoint: str, flow_checkpoint: Optional[str] = None):
        """
        Args:
            config: 체크포인트와 같은 architecture 설정
            checkpoint: decoder.ckpt 파일 또는 이를 담은 학습 출력 디렉터리
            flow_checkpoint: flow.ckpt (없으면 checkpoint 디렉터리에서 찾음)
        """
        self.config = config
        self.decoder = load_decoder(resolve_checkpoint(checkpoint, DECODER_CHECKPOINT), config)
        if flow_checkpoint is None and os.path.isdir(checkpoint):
            flow_checkpoint = os.path.join(checkpoint, FLOW_CHECKPOINT)
        self.flow_checkpoint = flow_checkpoint
        self._flow = None

    @property
    def flow(self):
        if self._flow is None:
            if self.flow_checkpoint is None:
                raise TrainingError("this render mode needs a flow checkpoint (train-flow output)")
            self._flow = load_flow(self.flow_checkpoint, self.config)
        return self._flow

    def latent(self, mode: str, inputs: SceneInputs) -> Slat:
        if mode == "gbuffer":
            return inputs.slat_lh
        return homogenize(
            self.flow, inputs.slat_shaded, inputs.condition, self.config.sampler_steps, seed=self.config.seed
        )

    def render(
        self,
        mode: str,
        inputs: SceneInputs,
        env: Optional[EnvMap] = None,
        camera: Optional[Camera] = None,
    ) -> Dict[str, np.ndarray]:
        """
        Raises:
            ConfigError: 알 수 없는 모드 또는 모드에 필요한 env / camera 누락
            TrainingError: 체크포인트 누락
        """
        if mode not in RENDER_MODES:
            raise ConfigError(f"Unknown render mode '{mode}', expected one of {RENDER_MODES}")
        if mode == "reconstruct":
            env, camera = inputs.input_env, inputs.input_camera
        elif mode == "relight":
            if env is None:
                raise ConfigError("relight mode needs --env")
            camera = inputs.input_camera
        elif mode == "novel-view":
            if camera is None:
                raise ConfigError("novel-view mode needs --camera")
            env = env if env is not None else inputs.input_env
        else:
            if env is None:
                raise ConfigError("gbuffer mode needs --env")
            camera = camera if camera is not None else inputs.input_camera

        camera = camera.with_resolution(self.config.image_size, self.config.image_size)
        slat = self.latent(mode, inputs)
        features = scene_features(self.config, lh=slat, shaded=inputs.slat_shaded)
        logger.info(f"Rendering {mode} view of {slat.num_tokens} voxels at {camera.width}x{camera.height}")
        return render_view(self.decoder, features, slat.coords, camera, env, self.config.threads)

    @Debug
    def render_to_files(
        self,
        mode: str,
        inputs: SceneInputs,
        out_prefix: str,
        env: Optional[EnvMap] = None,
        camera: Optional[Camera] = None,
    ) -> Dict[str, str]:
        maps = self.render(mode, inputs, env, camera)
        return write_maps(out_prefix, maps)


def write_maps(out_prefix: str, maps: Dict[str, np.ndarray]) -> Dict[str, str]:
    """HDR 은 PFM + AgX PNG, aux map 은 PNG + PFM 으로 저장"""
    directory = os.path.dirname(out_prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    written = {}
    written["png"] = f"{out_prefix}.png"
    write_hdr_png(written["png"], maps["hdr"])
    written["hdr"] = f"{out_prefix}_hdr.pfm"
    write_pfm(written["hdr"], maps["hdr"])
    for name in LDR_MAPS:
        written[name] = f"{out_prefix}_{name}.png"
        write_png(written[name], maps[name])
    written["depth"] = f"{out_prefix}_depth.pfm"
    write_pfm(written["depth"], maps["depth"])
    logger.info(f"Wrote {len(written)} images with prefix {out_prefix}")
    return written
