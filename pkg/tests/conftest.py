import numpy as np
import pytest

from near.core.tensor import precision
from near.schemas.run_config import RunConfig


def tiny_config(**overrides) -> RunConfig:
    """몇 초 안에 끝나는 학습/렌더 설정"""
    values = dict(
        seed=0,
        scene_count=1,
        scene_kind="sphere",
        surfel_budget=256,
        grid_resolution=4,
        feature_dim=4,
        basecolor_dim=4,
        aggregation_views=2,
        image_size=12,
        supervision_views=2,
        supervision_envs=2,
        heldout_envs=1,
        input_views=1,
        env_height=8,
        env_kinds=["sky", "studio"],
        oracle_env_height=4,
        tokenizer_levels=1,
        tokenizer_channels=4,
        tokenizer_window=2,
        tokenizer_blocks=1,
        light_tokens=4,
        token_dim=8,
        decoder_dim=8,
        num_heads=2,
        iad_blocks=1,
        lad_blocks=1,
        window_size=2,
        gaussians_per_voxel=1,
        decoder_iterations=2,
        warmup_steps=0,
        checkpoint_every=1,
        log_every=1,
        flow_dim=8,
        flow_blocks=1,
        flow_iterations=2,
        adapter_iterations=2,
        lora_rank=2,
        sampler_steps=2,
        toy_flow_iterations=20,
        toy_samples=64,
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    """finite-difference 검사는 float64 로 빌드"""
    with precision("float64"):
        yield


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def dataset_dir(tmp_path, config):
    """tiny 설정으로 생성한 데이터셋 디렉터리"""
    from near.services.dataset import DatasetService

    root = tmp_path / "data"
    DatasetService(config, str(root)).generate()
    return str(root)
