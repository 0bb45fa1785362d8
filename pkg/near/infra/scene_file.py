"""
사람이 읽을 수 있는 장면 파일

    seed = 3
    kind = custom
    surfel_budget = 2048

    [material red]
    albedo = 0.8, 0.1, 0.1
    roughness = 0.5
    metallic = 0.0

    [primitive]
    kind = sphere
    center = 0, 0.1, 0
    size = 0.4
    rotation_deg = 0, 0, 0
    materials = red

'#' 이후는 주석입니다.
"""

import logging
from typing import Dict, List, Optional

from pydantic import ValidationError

from near.core.errors import FormatError
from near.schemas.scene import Material, Primitive, SceneDescription

logger = logging.getLogger(__name__)

_VECTOR_KEYS = {"albedo", "center", "size", "rotation_deg"}
_LIST_KEYS = {"materials"}


def _parse_value(key: str, value: str):
    if key in _VECTOR_KEYS:
        try:
            return [float(part) for part in value.split(",")]
        except ValueError as e:
            raise FormatError(f"'{key}' expects comma-separated numbers, got '{value}'") from e
    if key in _LIST_KEYS:
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


def parse_scene_text(text: str) -> SceneDescription:
    """
    Raises:
        FormatError: 문법 오류나 스키마 검증 실패
    """
    header: Dict[str, object] = {}
    materials: List[Dict[str, object]] = []
    primitives: List[Dict[str, object]] = []
    current: Optional[Dict[str, object]] = header

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].split()
            if section[:1] == ["primitive"] and len(section) == 1:
                current = {}
                primitives.append(current)
            elif section[:1] == ["material"] and len(section) == 2:
                current = {"name": section[1]}
                materials.append(current)
            else:
                raise FormatError(f"line {number}: unknown section '{line}'")
            continue
        if "=" not in line:
            raise FormatError(f"line {number}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in current:
            raise FormatError(f"line {number}: duplicate key '{key}'")
        current[key] = _parse_value(key, value)

    try:
        return SceneDescription(
            **header,
            materials=[Material(**m) for m in materials],
            primitives=[Primitive(**p) for p in primitives],
        )
    except (ValidationError, TypeError) as e:
        raise FormatError(f"invalid scene file: {e}") from e


def format_scene(description: SceneDescription) -> str:
    def vec(values) -> str:
        return ", ".join(repr(float(v)) for v in values)

    lines = [
        f"seed = {description.seed}",
        f"kind = {description.kind}",
        f"surfel_budget = {description.surfel_budget}",
    ]
    for m in description.materials:
        lines += [
            "",
            f"[material {m.name}]",
            f"albedo = {vec(m.albedo)}",
            f"roughness = {m.roughness!r}",
            f"metallic = {m.metallic!r}",
        ]
    for p in description.primitives:
        lines += [
            "",
            "[primitive]",
            f"kind = {p.kind}",
            f"center = {vec(p.center)}",
            f"size = {vec(p.size)}",
            f"rotation_deg = {vec(p.rotation_deg)}",
            f"materials = {', '.join(p.materials)}",
        ]
    return "\n".join(lines) + "\n"


def read_scene_file(path: str) -> SceneDescription:
    with open(path, "r", encoding="utf-8") as f:
        return parse_scene_text(f.read())


def write_scene_file(path: str, description: SceneDescription) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_scene(description))
