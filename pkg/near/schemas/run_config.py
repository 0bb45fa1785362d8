"""
실험 설정 (RunConfig)

key=value 파일에서 읽습니다. 키는 NEAR_ 접두사, 중첩 필드는 "__" 로 구분:

    NEAR_GRID_RESOLUTION=16
    NEAR_LOSS_WEIGHTS__LAMBDA_VOL=10000
    NEAR_ENV_KINDS=["sky", "studio"]

우선순위: 명시적 override > 설정 파일 > NEAR_* 환경 변수 > 기본값.
기록된 run_config.env 를 다시 읽으면 셸에 남은 NEAR_* 값과 무관하게 같은 설정이 됩니다.
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional

from pydantic import Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from near.core.errors import ConfigError
from near.lighting.envmap import ENV_KINDS
from near.models.decoder import DECODER_INPUTS, LAD_VARIANTS
from near.oracle.scene import SCENE_KINDS
from near.schemas.loss import LossWeights

logger = logging.getLogger(__name__)

ENV_PREFIX = "NEAR_"
NESTED_DELIMITER = "__"

# 입력 view 카메라 범위 (degrees)
MAX_INPUT_YAW = 45.0
MIN_INPUT_PITCH = -10.0
MAX_INPUT_PITCH = 45.0

# "mixed" 는 장면 번호에 따라 SCENE_KINDS 를 순환
SCENE_CHOICES = SCENE_KINDS + ("mixed",)


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX,
        env_nested_delimiter=NESTED_DELIMITER,
        case_sensitive=False,
        extra="ignore",
    )

    seed: int = 0
    threads: int = Field(default=1, ge=1)

    # Scenes / SLAT
    scene_count: int = Field(default=4, ge=1)
    scene_kind: str = "mixed"
    surfel_budget: int = Field(default=4096, ge=1)
    grid_resolution: int = Field(default=16, ge=1)
    feature_dim: int = Field(default=64, ge=1)
    basecolor_dim: int = Field(default=8, ge=1)
    aggregation_views: int = Field(default=8, ge=1)

    # Cameras / images
    image_size: int = Field(default=64, ge=1)
    fov_deg: float = Field(default=40.0, gt=0.0, lt=180.0)
    camera_radius: float = Field(default=2.0, gt=0.0)
    supervision_views: int = Field(default=12, ge=1)
    supervision_envs: int = Field(default=16, ge=1)
    heldout_envs: int = Field(default=4, ge=0)
    input_views: int = Field(default=2, ge=1)
    input_yaw_deg: float = MAX_INPUT_YAW
    input_pitch_min_deg: float = MIN_INPUT_PITCH
    input_pitch_max_deg: float = MAX_INPUT_PITCH

    # Environment maps / oracle
    env_height: int = Field(default=64, ge=1)
    env_kinds: List[str] = ["sky", "studio", "six_lights", "hemisphere_lights"]
    area_light_scale: float = Field(default=0.01, gt=0.0)
    oracle_env_height: int = Field(default=16, ge=1)
    homogenized_e0: float = Field(default=1.0, gt=0.0)
    specular_weight: float = Field(default=0.0, ge=0.0, le=1.0)

    # Lighting tokenizer
    tokenizer_levels: int = Field(default=3, ge=1)
    tokenizer_channels: int = Field(default=32, ge=1)
    tokenizer_window: int = Field(default=4, ge=1)
    tokenizer_blocks: int = Field(default=2, ge=0)
    light_tokens: int = Field(default=64, ge=1)
    token_dim: int = Field(default=64, ge=1)

    # Decoder
    decoder_dim: int = Field(default=64, ge=1)
    num_heads: int = Field(default=4, ge=1)
    iad_blocks: int = Field(default=12, ge=0)
    lad_blocks: int = Field(default=6, ge=1)
    window_size: int = Field(default=4, ge=1)
    gaussians_per_voxel: int = Field(default=4, ge=1)
    lad_variant: str = "view_first"
    decoder_input: str = "lh_basecolor"
    shadow_strength: float = Field(default=0.0, ge=0.0, le=1.0)
    max_distance: float = Field(default=6.0, gt=0.0)
    loss_weights: LossWeights = LossWeights()

    # Decoder training
    decoder_iterations: int = Field(default=2000, ge=1)
    learning_rate: float = Field(default=5e-4, gt=0.0)
    min_learning_rate: float = Field(default=1e-5, ge=0.0)
    warmup_steps: int = Field(default=100, ge=0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    checkpoint_every: int = Field(default=200, ge=1)
    log_every: int = Field(default=50, ge=1)

    # Flow
    flow_dim: int = Field(default=64, ge=1)
    flow_blocks: int = Field(default=2, ge=1)
    flow_iterations: int = Field(default=1500, ge=1)
    adapter_iterations: int = Field(default=1500, ge=1)
    flow_learning_rate: float = Field(default=1e-4, gt=0.0)
    lora_rank: int = Field(default=8, ge=1)
    lora_alpha: float = Field(default=16.0, gt=0.0)
    sampler_steps: int = Field(default=25, ge=1)
    toy_flow_iterations: int = Field(default=2000, ge=1)
    toy_samples: int = Field(default=2048, ge=2)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # 앞쪽 source 가 우선
        return init_settings, dotenv_settings, env_settings

    @field_validator("scene_kind")
    @classmethod
    def validate_scene_kind(cls, v):
        if v not in SCENE_CHOICES:
            raise ValueError(f"scene_kind must be one of {SCENE_CHOICES}, got '{v}'")
        return v

    @field_validator("env_kinds")
    @classmethod
    def validate_env_kinds(cls, v):
        unknown = [kind for kind in v if kind not in ENV_KINDS]
        if not v or unknown:
            raise ValueError(f"env_kinds must be a non-empty subset of {ENV_KINDS}, got {v}")
        return v

    @field_validator("lad_variant")
    @classmethod
    def validate_lad_variant(cls, v):
        if v not in LAD_VARIANTS:
            raise ValueError(f"lad_variant must be one of {LAD_VARIANTS}, got '{v}'")
        return v

    @field_validator("decoder_input")
    @classmethod
    def validate_decoder_input(cls, v):
        if v not in DECODER_INPUTS:
            raise ValueError(f"decoder_input must be one of {DECODER_INPUTS}, got '{v}'")
        return v

    @model_validator(mode="after")
    def validate_consistency(self):
        if self.grid_resolution % self.window_size:
            raise ValueError(
                f"window_size {self.window_size} must divide grid_resolution {self.grid_resolution}"
            )
        if not 0.0 <= self.input_yaw_deg <= MAX_INPUT_YAW:
            raise ValueError(f"input_yaw_deg must lie in [0, {MAX_INPUT_YAW}]")
        if not (
            MIN_INPUT_PITCH <= self.input_pitch_min_deg <= self.input_pitch_max_deg <= MAX_INPUT_PITCH
        ):
            raise ValueError(
                f"input pitch range must lie in [{MIN_INPUT_PITCH}, {MAX_INPUT_PITCH}]"
            )
        levels = 2**self.tokenizer_levels
        if self.env_height % levels:
            raise ValueError(f"env_height {self.env_height} must be divisible by 2^tokenizer_levels")
        if (self.env_height // levels) % self.tokenizer_window:
            raise ValueError("tokenizer_window must divide the coarsest pyramid level")
        if self.heldout_envs >= self.supervision_envs:
            raise ValueError("heldout_envs must leave at least one training environment")
        if self.decoder_dim % self.num_heads or self.flow_dim % self.num_heads:
            raise ValueError("num_heads must divide decoder_dim and flow_dim")
        if self.token_dim % self.num_heads or self.tokenizer_channels % self.num_heads:
            raise ValueError("num_heads must divide token_dim and tokenizer_channels")
        return self

    # ------------------------------------------------------------------
    @property
    def env_width(self) -> int:
        return 2 * self.env_height

    def tokenizer_kwargs(self) -> Dict[str, Any]:
        return {
            "env_height": self.env_height,
            "levels": self.tokenizer_levels,
            "channels": self.tokenizer_channels,
            "token_count": self.light_tokens,
            "dim": self.token_dim,
            "num_heads": self.num_heads,
            "window": self.tokenizer_window,
            "blocks": self.tokenizer_blocks,
        }

    def scene_kind_for(self, index: int) -> str:
        if self.scene_kind == "mixed":
            return SCENE_KINDS[index % len(SCENE_KINDS)]
        return self.scene_kind

    def train_env_indices(self) -> List[int]:
        return list(range(self.supervision_envs - self.heldout_envs))

    def test_env_indices(self) -> List[int]:
        return list(range(self.supervision_envs - self.heldout_envs, self.supervision_envs))

    # ------------------------------------------------------------------
    @classmethod
    def from_file(cls, path: Optional[str] = None, **overrides) -> "RunConfig":
        """
        key=value 파일 (없으면 기본값) + 명시적 override

        Raises:
            ConfigError: 파일이 없거나, 알 수 없는 키, 검증 실패
        """
        if path is not None:
            if not os.path.exists(path):
                raise ConfigError(f"Config file not found: {path}")
            unknown = [key for key in _read_keys(path) if not _known_key(key)]
            if unknown:
                raise ConfigError(f"Unknown config keys in {path}: {unknown}")
        try:
            config = cls(_env_file=path, **{k: v for k, v in overrides.items() if v is not None})
        except ValidationError as e:
            raise ConfigError(f"Invalid run config: {e}") from e
        logger.debug(f"Loaded run config from {path or 'defaults'}")
        return config

    def dump_lines(self) -> List[str]:
        lines = []
        for key, value in sorted(self.model_dump().items()):
            if isinstance(value, dict):
                for sub, sub_value in sorted(value.items()):
                    lines.append(f"{_env_key(key)}{NESTED_DELIMITER}{sub.upper()}={_format(sub_value)}")
            else:
                lines.append(f"{_env_key(key)}={_format(value)}")
        return lines

    def dump(self, path: str) -> None:
        """유효 설정 전체를 정렬된 key=value 로 기록"""
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.dump_lines()) + "\n")


def _env_key(name: str) -> str:
    return f"{ENV_PREFIX}{name.upper()}"


def _format(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return json.dumps(list(value))
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _read_keys(path: str) -> List[str]:
    keys = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"Config line is not key=value: '{line}'")
            keys.append(line.split("=", 1)[0].strip())
    return keys


def _known_key(key: str) -> bool:
    upper = key.upper()
    if not upper.startswith(ENV_PREFIX):
        return False
    name = upper[len(ENV_PREFIX) :].lower()
    field, _, sub = name.partition(NESTED_DELIMITER)
    if field not in RunConfig.model_fields:
        return False
    if not sub:
        return True
    return field == "loss_weights" and sub in LossWeights.model_fields
