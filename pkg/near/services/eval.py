"""
평가: split 의 (장면 × 시점 × 조명) 마다 PSNR/SSIM 과 loss 항을 계산해 표로 기록
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from near.core.debug import Debug
from near.core.errors import ConfigError, TrainingError
from near.core.tensor import no_grad
from near.losses.metrics import image_metrics
from near.losses.objective import loss_values
from near.losses.tonemap import tonemap_agx
from near.models.decoder import NearDecoder
from near.models.flow import homogenize
from near.schemas.report import MetricsRow, format_report, summarize
from near.schemas.run_config import RunConfig
from near.services.dataset import Dataset, SceneData
from near.services.decoder import decode_and_render, loss_parts, scene_features

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "all")


def split_envs(config: RunConfig, split: str) -> List[int]:
    if split not in SPLITS:
        raise ConfigError(f"Unknown split '{split}', expected one of {SPLITS}")
    if split == "train":
        return config.train_env_indices()
    if split == "test":
        return config.test_env_indices()
    return list(range(config.supervision_envs))


def ground_truth_row(scene: SceneData, index: int, view: int, env: int) -> MetricsRow:
    """GT 를 자기 자신과 비교한 행 (평가 파이프라인 점검용)"""
    target = scene.target(view, env)
    ldr = tonemap_agx(target["hdr"])
    psnr, ssim = image_metrics(ldr, ldr)
    return MetricsRow(scene=index, view=view, env=env, psnr=psnr, ssim=ssim)


class EvalService:
    def __init__(
        self,
        config: RunConfig,
        dataset: Dataset,
        decoder: Optional[NearDecoder] = None,
        flow=None,
    ):
        """
        Args:
            decoder: None 이면 GT 대 GT 평가 (oracle self-eval)
            flow: 주어지면 Z_lh 대신 homogenize(Z_s) 를 decoder 입력으로 사용
        """
        self.config = config
        self.dataset = dataset
        self.decoder = decoder
        self.flow = flow
        self._features: Dict[int, np.ndarray] = {}

    def _scene_features(self, index: int, scene: SceneData) -> np.ndarray:
        if index not in self._features:
            lh = scene.slat_lh
            if self.flow is not None:
                lh = homogenize(
                    self.flow, scene.slat_shaded, scene.condition, self.config.sampler_steps, seed=self.config.seed
                )
            self._features[index] = scene_features(self.config, lh=lh, shaded=scene.slat_shaded)
        return self._features[index]

    def _row(self, index: int, scene: SceneData, view: int, env: int) -> MetricsRow:
        if self.decoder is None:
            return ground_truth_row(scene, index, view, env)
        target = scene.target(view, env)
        with no_grad():
            decoded, frame = decode_and_render(
                self.decoder,
                self._scene_features(index, scene),
                scene.slat_lh.coords,
                self.dataset.cameras[view],
                scene.env(env),
                self.config.threads,
            )
            values = loss_values(loss_parts(decoded, frame, target, self.config.loss_weights.ssim_weight))
        prediction = tonemap_agx(np.maximum(frame.hdr.numpy(), 0.0))
        psnr, ssim = image_metrics(prediction, tonemap_agx(target["hdr"]))
        return MetricsRow(scene=index, view=view, env=env, psnr=psnr, ssim=ssim, **values)

    @Debug
    def evaluate(self, split: str = "test", scenes: Optional[Sequence[int]] = None) -> List[MetricsRow]:
        """
        Raises:
            TrainingError: split 이 비어 있는 경우
        """
        envs = split_envs(self.config, split)
        scenes = list(range(len(self.dataset))) if scenes is None else list(scenes)
        if not envs or not scenes:
            raise TrainingError(f"evaluation split '{split}' is empty")
        rows = []
        for index in scenes:
            scene = self.dataset.scene(index)
            for view in range(len(self.dataset.cameras)):
                for env in envs:
                    rows.append(self._row(index, scene, view, env))
        summary = summarize(rows)
        logger.info(
            f"Evaluated {summary.rows} rows on split '{split}': "
            f"PSNR {summary.mean_psnr:.3f} SSIM {summary.mean_ssim:.4f}"
        )
        return rows

    def write_report(self, path: str, rows: List[MetricsRow]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(format_report(rows))
        logger.info(f"Wrote metrics report to {path}")
