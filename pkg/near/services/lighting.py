"""
환경맵 읽기와 lighting tokenizer 실행 (`near envtok`)
"""

import logging
import os
from typing import Dict, Optional

import numpy as np

from near.core.errors import FormatError, GeometryError
from near.core.tensor import no_grad
from near.infra.checkpoint import load_checkpoint, strip_prefix
from near.infra.hdr_io import read_hdr, read_pfm, write_pfm
from near.lighting.envmap import EnvMap, EnvTriplet, decompose, pool_envmap
from near.models.tokenizer import LightingTokenizer
from near.schemas.run_config import RunConfig

logger = logging.getLogger(__name__)

ENV_SUFFIXES = (".hdr", ".pfm")


def read_env(path: str, height: Optional[int] = None) -> EnvMap:
    """
    .hdr (RGBE) 또는 .pfm 환경맵. height 가 주어지면 solid angle 가중 평균으로 축소

    Raises:
        FormatError: 지원하지 않는 확장자 또는 잘못된 파일
        GeometryError: height 로 나누어떨어지지 않는 맵
    """
    suffix = os.path.splitext(path)[1].lower()
    if suffix not in ENV_SUFFIXES:
        raise FormatError(f"environment map must be one of {ENV_SUFFIXES}, got '{path}'")
    if not os.path.exists(path):
        raise FormatError(f"environment map not found: {path}")
    env = EnvMap(read_hdr(path) if suffix == ".hdr" else read_pfm(path))
    if height is None or env.height == height:
        return env
    if env.height < height:
        raise GeometryError(f"environment map has {env.height} rows, need at least {height}")
    radiance, _, _ = pool_envmap(env, height)
    logger.info(f"Pooled environment map {path} from {env.height} to {height} rows")
    return EnvMap(radiance)


def dump_triplet(triplet: EnvTriplet, prefix: str) -> Dict[str, str]:
    """<prefix>_ldr.pfm, <prefix>_log.pfm, <prefix>_dir.pfm"""
    directory = os.path.dirname(prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    paths = {}
    for name in ("ldr", "log", "dir"):
        paths[name] = f"{prefix}_{name}.pfm"
        write_pfm(paths[name], getattr(triplet, f"e_{name}"))
    return paths


class EnvTokenService:
    def __init__(self, config: RunConfig, checkpoint: Optional[str] = None):
        """
        Args:
            checkpoint: decoder 체크포인트 (tokenizer/ 항목 사용). 없으면 seed 초기화
        """
        self.config = config
        self.tokenizer = LightingTokenizer(np.random.default_rng([config.seed, 41]), **config.tokenizer_kwargs())
        if checkpoint is not None:
            state = strip_prefix("tokenizer/", load_checkpoint(checkpoint))
            self.tokenizer.load_state_dict(state)
            logger.info(f"Loaded tokenizer weights from {checkpoint}")

    def tokenize(self, env: EnvMap, camera_rotation: Optional[np.ndarray] = None) -> np.ndarray:
        """(T, D) light token"""
        with no_grad():
            return self.tokenizer(decompose(env, camera_rotation)).numpy()

    def run(self, path: str, dump_prefix: Optional[str] = None) -> Dict[str, object]:
        env = read_env(path, self.config.env_height)
        triplet = decompose(env)
        result: Dict[str, object] = {"env": path, "e_max": triplet.e_max}
        if dump_prefix is not None:
            result["triplet"] = dump_triplet(triplet, dump_prefix)
        with no_grad():
            tokens = self.tokenizer(triplet).numpy()
        result["tokens"] = list(tokens.shape)
        result["token_norm"] = float(np.linalg.norm(tokens))
        return result
