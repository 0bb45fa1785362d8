from typing import List, Literal, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

PRIMITIVE_SIZES = {"sphere": 1, "box": 3, "torus": 2}


class Material(BaseModel):
    name: str
    albedo: Tuple[float, float, float]
    roughness: float = Field(gt=0.0, le=1.0)
    metallic: float = Field(ge=0.0, le=1.0)

    @field_validator("albedo")
    @classmethod
    def validate_albedo(cls, v):
        if any(c < 0.0 or c > 1.0 for c in v):
            raise ValueError("albedo channels must be in [0, 1]")
        return v


class Primitive(BaseModel):
    """
    SDF primitive

    size 는 kind 별로 sphere [radius], box [hx, hy, hz], torus [major, minor] 입니다.
    torus 는 local xz 평면에 놓입니다. materials 가 두 개면 local y ≥ 0 쪽이 첫 번째입니다.
    """

    kind: Literal["sphere", "box", "torus"]
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: List[float]
    rotation_deg: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    materials: List[str] = Field(min_length=1, max_length=2)

    @model_validator(mode="after")
    def validate_size(self):
        expected = PRIMITIVE_SIZES[self.kind]
        if len(self.size) != expected:
            raise ValueError(f"{self.kind} needs {expected} size values, got {len(self.size)}")
        if any(s <= 0.0 for s in self.size):
            raise ValueError("primitive sizes must be positive")
        if self.kind == "torus" and self.size[1] >= self.size[0]:
            raise ValueError("torus minor radius must be smaller than the major radius")
        return self


class SceneDescription(BaseModel):
    seed: int = 0
    kind: str = "custom"
    surfel_budget: int = Field(default=4096, gt=0)
    materials: List[Material]
    primitives: List[Primitive] = Field(min_length=1)

    @model_validator(mode="after")
    def validate_materials(self):
        names = [m.name for m in self.materials]
        if len(set(names)) != len(names):
            raise ValueError("material names must be unique")
        for primitive in self.primitives:
            for name in primitive.materials:
                if name not in names:
                    raise ValueError(f"primitive references unknown material '{name}'")
        return self

    def material_index(self, name: str) -> int:
        return [m.name for m in self.materials].index(name)
