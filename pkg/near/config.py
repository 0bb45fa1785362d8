import logging
from typing import Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings

logger = logging.getLogger(__name__)

SUPPORTED_PRECISIONS = ("float32", "float64")


class Settings(BaseSettings):
    # Logging
    log_level: str = "INFO"
    debug: bool = False

    # 수치 정밀도 (gradient check 는 float64 빌드를 사용)
    precision: str = "float32"

    # 병렬 처리 설정
    threads: int = 1
    tile_size: int = 16

    # 기본 출력 경로
    output_root: Optional[str] = None

    @field_validator("precision")
    @classmethod
    def validate_precision(cls, v):
        if v not in SUPPORTED_PRECISIONS:
            raise ValueError(
                f"precision must be one of {SUPPORTED_PRECISIONS}, got '{v}'"
            )
        return v

    @field_validator("threads", "tile_size")
    @classmethod
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError("threads and tile_size must be positive")
        return v

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        if not isinstance(logging.getLevelName(v.upper()), int):
            logger.warning(f"Unknown log level '{v}', falling back to INFO")
            return "INFO"
        return v.upper()

    class Config:
        env_file = ".env"
        env_prefix = "NEAR_"
        case_sensitive = False
        extra = "ignore"


def get_settings() -> Settings:
    """설정 인스턴스를 반환하는 팩토리 함수"""
    return Settings()


settings = get_settings()
