"""
Stage-2 학습: lighting tokenizer + IAD + LAD + heads 를 end-to-end 로 학습

한 step 은 (장면, 시점, 조명) 하나를 뽑아 Gaussian 을 decode 하고
rasterize 한 뒤 5 항 objective 로 갱신합니다. step 마다의 난수는
(seed, step) 에서 파생되므로 체크포인트에서 이어 학습해도 같은 결과가 나옵니다.
"""

import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from near.core.debug import Debug
from near.core.errors import TrainingError
from near.core.optim import AdamW, warmup_cosine_lr
from near.core.tensor import Tape, Tensor, no_grad, relu
from near.infra.artifacts import OutputLock
from near.infra.checkpoint import load_checkpoint, save_checkpoint
from near.latent.slat import Slat
from near.lighting.envmap import EnvMap, decompose
from near.losses.objective import LOSS_TERMS, loss_pbr, loss_recon, loss_reg, loss_shadow, loss_values, total_loss
from near.models.decoder import DecodedView, NearDecoder, decoder_input_features
from near.render.camera import Camera
from near.render.rasterizer import RenderedFrame, rasterize
from near.schemas.run_config import RunConfig
from near.services.dataset import Dataset, SceneData

logger = logging.getLogger(__name__)

DECODER_CHECKPOINT = "decoder.ckpt"
LOSS_CURVE = "loss_curve.tsv"
CURVE_COLUMNS = ("step", "lr", "total") + LOSS_TERMS


def build_decoder(config: RunConfig) -> NearDecoder:
    return NearDecoder(
        np.random.default_rng([config.seed, 31]),
        feature_dim=config.feature_dim,
        basecolor_dim=config.basecolor_dim,
        grid_resolution=config.grid_resolution,
        dim=config.decoder_dim,
        num_heads=config.num_heads,
        iad_blocks=config.iad_blocks,
        lad_blocks=config.lad_blocks,
        window_size=config.window_size,
        children=config.gaussians_per_voxel,
        lad_variant=config.lad_variant,
        decoder_input=config.decoder_input,
        shadow_strength=config.shadow_strength,
        max_distance=config.max_distance,
        tokenizer_kwargs=config.tokenizer_kwargs(),
    )


def load_decoder(path: str, config: RunConfig) -> NearDecoder:
    """
    Raises:
        TrainingError: 체크포인트가 없는 경우
    """
    if not os.path.exists(path):
        raise TrainingError(f"Decoder checkpoint not found: {path}")
    decoder = build_decoder(config)
    decoder.load_checkpoint_state(load_checkpoint(path))
    return decoder


def scene_features(config: RunConfig, lh: Optional[Slat], shaded: Optional[Slat]) -> np.ndarray:
    return decoder_input_features(config.decoder_input, lh=lh, shaded=shaded)


def decode_and_render(
    decoder: NearDecoder,
    features: np.ndarray,
    coords: np.ndarray,
    camera: Camera,
    env: EnvMap,
    threads: int = 1,
) -> Tuple[DecodedView, RenderedFrame]:
    decoded = decoder(features, coords, camera, decompose(env, camera.rotation))
    return decoded, rasterize(decoded.gaussians, camera, threads=threads)


def render_view(
    decoder: NearDecoder,
    features: np.ndarray,
    coords: np.ndarray,
    camera: Camera,
    env: EnvMap,
    threads: int = 1,
) -> Dict[str, np.ndarray]:
    """추론용 렌더: map 이름 → numpy (hdr 는 음수 제거)"""
    with no_grad():
        _, frame = decode_and_render(decoder, features, coords, camera, env, threads)
    maps = {name: np.array(value) for name, value in frame.numpy().items()}
    maps["hdr"] = np.maximum(maps["hdr"], 0.0)
    return maps


def loss_parts(
    decoded: DecodedView,
    frame: RenderedFrame,
    target: Dict[str, np.ndarray],
    ssim_weight: float,
) -> Dict[str, Tensor]:
    bundle = decoded.bundle
    prediction = {
        "basecolor": frame.basecolor,
        "roughness": frame.roughness,
        "metallic": frame.metallic,
        "shadow": frame.shadow,
    }
    vol, alpha = loss_reg(bundle.scales, bundle.light_scales, bundle.opacity)
    return {
        "recon": loss_recon(relu(frame.hdr), target["hdr"], ssim_weight),
        "pbr": loss_pbr(prediction, target),
        "shadow": loss_shadow(frame.shadow, target["shadow"]),
        "vol": vol,
        "alpha": alpha,
    }


def training_samples(
    dataset: Dataset, env_indices: Sequence[int], scenes: Optional[Sequence[int]] = None
) -> List[Tuple[int, int, int]]:
    scenes = range(len(dataset)) if scenes is None else scenes
    return [
        (s, v, e)
        for s in scenes
        for v in range(len(dataset.cameras))
        for e in env_indices
    ]


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, values.size))
    return np.convolve(values, np.ones(window) / window, mode="valid")


class DecoderTrainingService:
    def __init__(self, config: RunConfig, out_dir: str):
        self.config = config
        self.out_dir = out_dir
        self.checkpoint_path = os.path.join(out_dir, DECODER_CHECKPOINT)
        self.curve_path = os.path.join(out_dir, LOSS_CURVE)

    def _save(self, decoder: NearDecoder, optimizer: AdamW, step: int) -> None:
        tensors = decoder.checkpoint_state()
        tensors.update(optimizer.state_dict())
        tensors["train/step"] = np.array(step, dtype=np.float64)
        save_checkpoint(self.checkpoint_path, tensors)
        logger.info(f"Saved decoder checkpoint at step {step} to {self.checkpoint_path}")

    def _restore(self, decoder: NearDecoder, optimizer: AdamW) -> int:
        tensors = load_checkpoint(self.checkpoint_path)
        decoder.load_checkpoint_state(tensors)
        optimizer.load_state_dict(tensors)
        step = int(np.asarray(tensors.get("train/step", np.zeros(1))).reshape(-1)[0])
        logger.info(f"Resuming decoder training from step {step}")
        return step

    def _read_curve(self, upto: int) -> List[str]:
        if not os.path.exists(self.curve_path):
            return []
        with open(self.curve_path, "r", encoding="utf-8") as f:
            rows = [line.rstrip("\n") for line in f if line.strip() and not line.startswith("step")]
        return rows[:upto]

    def _write_curve(self, rows: List[str]) -> None:
        with open(self.curve_path, "w", encoding="utf-8") as f:
            f.write("\t".join(CURVE_COLUMNS) + "\n")
            for row in rows:
                f.write(row + "\n")

    @Debug
    def train(
        self,
        dataset: Dataset,
        resume: bool = False,
        scenes: Optional[Sequence[int]] = None,
        env_indices: Optional[Sequence[int]] = None,
    ) -> Dict[str, object]:
        """
        Args:
            dataset: `near gen` 출력
            resume: out_dir 의 체크포인트에서 이어서 학습
            scenes: 학습에 쓸 장면 번호 (기본 전체)
            env_indices: 학습 조명 (기본 config.train_env_indices())

        Raises:
            TrainingError: loss 발산 (NaN/Inf), lock 된 출력 디렉터리
        """
        config = self.config
        env_indices = list(env_indices) if env_indices is not None else config.train_env_indices()
        samples = training_samples(dataset, env_indices, scenes)
        if not samples:
            raise TrainingError("decoder training has no (scene, view, env) samples")

        with OutputLock(self.out_dir):
            config.dump(os.path.join(self.out_dir, "run_config.env"))
            decoder = build_decoder(config)
            optimizer = AdamW(
                decoder.trainable_parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
            )
            start = 0
            if resume and os.path.exists(self.checkpoint_path):
                start = self._restore(decoder, optimizer)
            curve = self._read_curve(start)
            totals: List[float] = []
            features: Dict[int, np.ndarray] = {}

            for step in tqdm(range(start, config.decoder_iterations), desc="decoder"):
                rng = np.random.default_rng([config.seed, 32, step])
                s, v, e = samples[int(rng.integers(0, len(samples)))]
                scene: SceneData = dataset.scene(s)
                if s not in features:
                    features[s] = scene_features(config, scene.slat_lh, scene.slat_shaded)
                lr = warmup_cosine_lr(
                    step, config.learning_rate, config.decoder_iterations,
                    config.warmup_steps, config.min_learning_rate,
                )

                optimizer.zero_grad()
                with Tape() as tape:
                    decoded, frame = decode_and_render(
                        decoder, features[s], scene.slat_lh.coords, dataset.cameras[v], scene.env(e), config.threads
                    )
                    parts = loss_parts(decoded, frame, scene.target(v, e), config.loss_weights.ssim_weight)
                    loss = total_loss(parts, config.loss_weights)
                values = loss_values(parts)
                if not loss.is_finite:
                    logger.error(f"Decoder loss diverged at step {step}: {values}")
                    raise TrainingError(
                        f"decoder loss is not finite at step {step} (scene {s}, view {v}, env {e}): {values}"
                    )
                tape.backward(loss)
                optimizer.step(lr)

                totals.append(loss.item())
                curve.append(
                    "\t".join([str(step), f"{lr:.8g}", f"{loss.item():.8g}"] + [f"{values[n]:.8g}" for n in LOSS_TERMS])
                )
                if step % config.log_every == 0:
                    logger.info(f"decoder step {step}: loss {loss.item():.5f} recon {values['recon']:.5f} lr {lr:.2e}")
                if (step + 1) % config.checkpoint_every == 0 or step + 1 == config.decoder_iterations:
                    self._save(decoder, optimizer, step + 1)
                    self._write_curve(curve)

            if start >= config.decoder_iterations:
                self._write_curve(curve)
        self._check_trend(totals)
        return {
            "checkpoint": self.checkpoint_path,
            "loss_curve": self.curve_path,
            "steps": config.decoder_iterations,
            "final_loss": totals[-1] if totals else None,
        }

    def _check_trend(self, totals: List[float]) -> None:
        if len(totals) < 20:
            return
        window = max(len(totals) // 10, 1)
        curve = smoothed(totals, window)
        if curve[-1] >= curve[0]:
            logger.warning(
                f"Smoothed decoder loss did not decrease ({curve[0]:.5f} -> {curve[-1]:.5f})"
            )
