from pydantic import BaseModel, Field


class LossWeights(BaseModel):
    """Stage-2 objective 가중치"""

    lambda_pbr: float = Field(default=0.3, ge=0.0)
    lambda_shadow: float = Field(default=0.5, ge=0.0)
    lambda_vol: float = Field(default=10000.0, ge=0.0)
    lambda_alpha: float = Field(default=0.001, ge=0.0)
    ssim_weight: float = Field(default=0.2, ge=0.0)
