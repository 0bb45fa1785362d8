"""
Stage-1 학습: rectified flow + LoRA

1. base 단계: 이미지 condition 으로 Z_s 를 생성하도록 VelocityNet 을 학습
   (shaded channel 은 0).
2. adapter 단계: base 를 고정하고 q/k/v/o projection 에 LoRA 를 붙여
   Z_s 를 condition 으로 Z_lh 를 생성하도록 adapter 만 학습.

체크포인트 (flow.ckpt): base/…, adapter/…, meta/adapter_steps
"""

import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from near.core.debug import Debug
from near.core.errors import NonFiniteError, TrainingError
from near.core.optim import AdamW
from near.core.tensor import Tape
from near.infra.artifacts import OutputLock
from near.infra.checkpoint import load_checkpoint, save_checkpoint, strip_prefix, with_prefix
from near.models.flow import cfm_loss, flow_batch, homogenize, make_two_moons, sample
from near.models.lora import freeze_base, lora_parameters
from near.models.velocity import FlowConditions, ToyVelocityMLP, VelocityNet
from near.schemas.run_config import RunConfig
from near.services.dataset import Dataset

logger = logging.getLogger(__name__)

FLOW_CHECKPOINT = "flow.ckpt"


def build_velocity_net(config: RunConfig) -> VelocityNet:
    rng = np.random.default_rng([config.seed, 11])
    return VelocityNet(
        rng,
        feature_dim=config.feature_dim,
        cond_dim=config.feature_dim,
        dim=config.flow_dim,
        num_heads=config.num_heads,
        blocks=config.flow_blocks,
        window_size=config.window_size,
    )


def attach_adapters(net: VelocityNet, config: RunConfig) -> List[str]:
    names = net.attach_adapters(config.lora_rank, config.lora_alpha, np.random.default_rng([config.seed, 12]))
    freeze_base(net)
    return names


def save_flow(path: str, net: VelocityNet) -> None:
    adapters = lora_parameters(net)
    base = {n: p.data for n, p in net.named_parameters() if n not in adapters}
    tensors = with_prefix("base/", base)
    tensors.update(with_prefix("adapter/", {n: p.data for n, p in adapters.items()}))
    tensors["meta/adapter_steps"] = np.array(net.adapter_steps, dtype=np.float64)
    save_checkpoint(path, tensors)
    logger.info(f"Saved flow checkpoint to {path} ({len(adapters)} adapter tensors)")


def load_flow(path: str, config: RunConfig) -> VelocityNet:
    """
    Raises:
        TrainingError: 체크포인트가 없는 경우
    """
    if not os.path.exists(path):
        raise TrainingError(f"Flow checkpoint not found: {path}")
    tensors = load_checkpoint(path)
    net = build_velocity_net(config)
    adapters = strip_prefix("adapter/", tensors)
    if adapters:
        attach_adapters(net, config)
    state = strip_prefix("base/", tensors)
    state.update(adapters)
    net.load_state_dict(state)
    net.adapter_steps = int(tensors.get("meta/adapter_steps", np.zeros(1)).reshape(-1)[0])
    return net


def _conditions(scene, shaded: Optional[np.ndarray]) -> FlowConditions:
    slat = scene.slat_shaded
    feats = np.zeros_like(slat.feats) if shaded is None else shaded
    return FlowConditions(feats, scene.condition, slat.coords, slat.grid_resolution)


def _train_phase(
    net: VelocityNet,
    dataset: Dataset,
    config: RunConfig,
    iterations: int,
    phase: str,
) -> List[float]:
    """
    phase "base": z0 = Z_s, shaded channel 0
    phase "adapter": z0 = Z_lh, shaded channel Z_s
    """
    params = net.trainable_parameters()
    optimizer = AdamW(params, lr=config.flow_learning_rate)
    losses = []
    cache: Dict[int, FlowConditions] = {}
    for step in tqdm(range(iterations), desc=f"flow-{phase}"):
        rng = np.random.default_rng([config.seed, 13 if phase == "base" else 14, step])
        index = int(rng.integers(0, len(dataset)))
        scene = dataset.scene(index)
        if index not in cache:
            shaded = None if phase == "base" else scene.slat_shaded.feats
            cache[index] = _conditions(scene, shaded)
        z0 = (scene.slat_shaded if phase == "base" else scene.slat_lh).feats.astype(np.float64)
        eps, z_t, t = flow_batch(z0, rng)

        optimizer.zero_grad()
        with Tape() as tape:
            loss = cfm_loss(net(z_t, t, cache[index]), z0, eps)
        if not loss.is_finite:
            raise TrainingError(f"flow {phase} loss diverged at step {step} (scene {index}, t={t:.3f})")
        tape.backward(loss)
        optimizer.step()
        losses.append(loss.item())
        if step % config.log_every == 0:
            logger.info(f"flow-{phase} step {step}: loss {losses[-1]:.5f}")
    return losses


def homogenization_mse(net: VelocityNet, dataset: Dataset, config: RunConfig) -> Tuple[float, float]:
    """
    Returns:
        (MSE(Ẑ_lh, Z_lh), MSE(Z_s, Z_lh)) 장면 평균
    """
    sampled, baseline = [], []
    for index in range(len(dataset)):
        scene = dataset.scene(index)
        predicted = homogenize(net, scene.slat_shaded, scene.condition, config.sampler_steps, seed=index)
        target = scene.slat_lh.feats
        sampled.append(float(np.mean((predicted.feats - target) ** 2)))
        baseline.append(float(np.mean((scene.slat_shaded.feats - target) ** 2)))
    return float(np.mean(sampled)), float(np.mean(baseline))


class FlowTrainingService:
    def __init__(self, config: RunConfig, out_dir: str):
        self.config = config
        self.out_dir = out_dir

    @Debug
    def train(self, dataset: Dataset) -> Dict[str, object]:
        """
        base → adapter 순서로 학습하고 adapter 체크포인트를 저장

        Raises:
            TrainingError: 발산 또는 lock 된 출력 디렉터리
        """
        config = self.config
        with OutputLock(self.out_dir):
            config.dump(os.path.join(self.out_dir, "run_config.env"))
            net = build_velocity_net(config)
            base_losses = _train_phase(net, dataset, config, config.flow_iterations, "base")

            names = attach_adapters(net, config)
            logger.info(f"Training {len(names)} LoRA adapters with the base frozen")
            adapter_losses = _train_phase(net, dataset, config, config.adapter_iterations, "adapter")
            net.adapter_steps = config.adapter_iterations

            path = os.path.join(self.out_dir, FLOW_CHECKPOINT)
            save_flow(path, net)
            try:
                mse, baseline = homogenization_mse(net, dataset, config)
            except NonFiniteError as e:
                logger.error(f"Sampling diverged after training: {e}")
                raise TrainingError(f"sampling diverged: {e}") from e
        logger.info(f"Homogenization MSE {mse:.5f} vs identity baseline {baseline:.5f}")
        return {
            "checkpoint": path,
            "base_loss": base_losses[-1],
            "adapter_loss": adapter_losses[-1],
            "homogenization_mse": mse,
            "identity_mse": baseline,
        }


# ----------------------------------------------------------------------
# 2D sanity flow
# ----------------------------------------------------------------------
def train_toy_flow(
    iterations: int = 2000,
    samples: int = 2048,
    batch: int = 256,
    lr: float = 2e-3,
    seed: int = 0,
) -> Tuple[ToyVelocityMLP, np.ndarray]:
    """two-moons 위에서 ToyVelocityMLP 를 학습. (net, 데이터) 반환"""
    data = make_two_moons(samples, seed=seed)
    net = ToyVelocityMLP(np.random.default_rng([seed, 21]))
    optimizer = AdamW(net.trainable_parameters(), lr=lr)
    for step in range(iterations):
        rng = np.random.default_rng([seed, 22, step])
        z0 = data[rng.choice(samples, size=min(batch, samples), replace=False)]
        eps, z_t, t = flow_batch(z0, rng, per_row_time=True)
        optimizer.zero_grad()
        with Tape() as tape:
            loss = cfm_loss(net(z_t, t), z0, eps)
        tape.backward(loss)
        optimizer.step()
        if step % 500 == 0:
            logger.debug(f"toy flow step {step}: loss {loss.item():.4f}")
    return net, data


def toy_moments(net: ToyVelocityMLP, count: int, steps: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    points = sample(net, None, (count, 2), steps=steps, seed=seed)
    return points.mean(axis=0), np.cov(points, rowvar=False)
