"""
Oracle 장면: SDF primitive 합집합과 그 표면 위 surfel

- sdf / sphere_trace: primitive 합집합의 signed distance 와 ray marching
- generate_scene: seed 와 kind 로부터 결정적인 장면 생성
- SurfelScene.visibility: surfel × 환경 방향 occlusion (장면별 cache)
"""

import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from near.core.errors import ConfigError, GeometryError
from near.render.camera import rotation_from_euler
from near.schemas.scene import Material, Primitive, SceneDescription

logger = logging.getLogger(__name__)

SCENE_KINDS = ("sphere", "box", "torus", "composite")
SURFACE_EPS = 1e-4
RAY_OFFSET = 2e-3
MAX_TRACE_STEPS = 128


class SdfPrimitive:
    """
    world 좌표의 SDF primitive

    Attributes:
        rotation: local→world 회전 (world = rotation·local + center)
        materials: (위쪽, 아래쪽) material index
    """

    def __init__(
        self,
        kind: str,
        center: np.ndarray,
        size: np.ndarray,
        rotation: np.ndarray,
        materials: Tuple[int, int],
    ):
        self.kind = kind
        self.center = np.asarray(center, dtype=np.float64)
        self.size = np.asarray(size, dtype=np.float64)
        self.rotation = np.asarray(rotation, dtype=np.float64)
        self.materials = materials

    @classmethod
    def from_description(cls, primitive: Primitive, scene: SceneDescription) -> "SdfPrimitive":
        rotation = rotation_from_euler(*(math.radians(a) for a in primitive.rotation_deg))
        ids = [scene.material_index(name) for name in primitive.materials]
        return cls(primitive.kind, primitive.center, primitive.size, rotation, (ids[0], ids[-1]))

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) @ self.rotation

    def sdf(self, points: np.ndarray) -> np.ndarray:
        q = self.to_local(points)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - self.size
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            return outside + np.minimum(d.max(axis=-1), 0.0)
        ring = np.linalg.norm(q[..., [0, 2]], axis=-1) - self.size[0]
        return np.sqrt(ring * ring + q[..., 1] ** 2) - self.size[1]

    def area(self) -> float:
        if self.kind == "sphere":
            return 4.0 * math.pi * self.size[0] ** 2
        if self.kind == "box":
            hx, hy, hz = self.size
            return 8.0 * (hx * hy + hy * hz + hx * hz)
        return 4.0 * math.pi**2 * self.size[0] * self.size[1]

    def sample(self, rng: np.random.Generator, count: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        stratified 표면 샘플

        Returns:
            (world 위치, world 법선, local y 좌표)
        """
        if self.kind == "sphere":
            local, normals = _sample_sphere(rng, count, self.size[0])
        elif self.kind == "box":
            local, normals = _sample_box(rng, count, self.size)
        else:
            local, normals = _sample_torus(rng, count, self.size[0], self.size[1])
        points = local @ self.rotation.T + self.center
        return points, normals @ self.rotation.T, local[:, 1]

    def rotated(self, world_rotation: np.ndarray) -> "SdfPrimitive":
        Q = np.asarray(world_rotation, dtype=np.float64)
        return SdfPrimitive(self.kind, Q @ self.center, self.size, Q @ self.rotation, self.materials)


# ----------------------------------------------------------------------
# Stratified sampling
# ----------------------------------------------------------------------
def _stratified_square(rng: np.random.Generator, count: int) -> np.ndarray:
    """jittered grid 에서 count 개 셀을 골라 [0,1)² 샘플 생성"""
    if count <= 0:
        return np.zeros((0, 2))
    rows = int(math.ceil(math.sqrt(count)))
    cols = int(math.ceil(count / rows))
    cells = np.sort(rng.permutation(rows * cols)[:count])
    r, c = np.divmod(cells, cols)
    jitter = rng.random((count, 2))
    return np.stack([(c + jitter[:, 0]) / cols, (r + jitter[:, 1]) / rows], axis=1)


def _sample_sphere(rng, count, radius):
    uv = _stratified_square(rng, count)
    z = 1.0 - 2.0 * uv[:, 1]
    phi = 2.0 * math.pi * uv[:, 0]
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    normals = np.stack([r * np.cos(phi), z, r * np.sin(phi)], axis=1)
    return radius * normals, normals


def _split_counts(count: int, weights: np.ndarray) -> np.ndarray:
    exact = count * weights / weights.sum()
    counts = np.floor(exact).astype(np.int64)
    remainder = count - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def _sample_box(rng, count, half):
    hx, hy, hz = half
    # 면 순서: ±x, ±y, ±z
    face_area = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    counts = _split_counts(count, face_area)
    points, normals = [], []
    for face, n in enumerate(counts):
        axis, sign = divmod(face, 2)
        sign = 1.0 if sign == 0 else -1.0
        uv = _stratified_square(rng, int(n)) * 2.0 - 1.0
        others = [a for a in range(3) if a != axis]
        p = np.zeros((int(n), 3))
        p[:, axis] = sign * half[axis]
        p[:, others[0]] = uv[:, 0] * half[others[0]]
        p[:, others[1]] = uv[:, 1] * half[others[1]]
        nrm = np.zeros((int(n), 3))
        nrm[:, axis] = sign
        points.append(p)
        normals.append(nrm)
    return np.concatenate(points), np.concatenate(normals)


def _torus_tube_angle(u: np.ndarray, major: float, minor: float) -> np.ndarray:
    """면적 밀도 (R + r·cos v) 에 대한 역 CDF (Newton)"""
    target = 2.0 * math.pi * major * u
    v = 2.0 * math.pi * u
    for _ in range(30):
        f = major * v + minor * np.sin(v) - target
        v = v - f / (major + minor * np.cos(v))
    return v


def _sample_torus(rng, count, major, minor):
    uv = _stratified_square(rng, count)
    ring = 2.0 * math.pi * uv[:, 0]
    tube = _torus_tube_angle(uv[:, 1], major, minor)
    normals = np.stack(
        [np.cos(tube) * np.cos(ring), np.sin(tube), np.cos(tube) * np.sin(ring)], axis=1
    )
    center = np.stack([major * np.cos(ring), np.zeros_like(ring), major * np.sin(ring)], axis=1)
    return center + minor * normals, normals


# ----------------------------------------------------------------------
# Scene
# ----------------------------------------------------------------------
def union_sdf(primitives: List[SdfPrimitive], points: np.ndarray) -> np.ndarray:
    dist = primitives[0].sdf(points)
    for primitive in primitives[1:]:
        dist = np.minimum(dist, primitive.sdf(points))
    return dist


def sphere_trace(
    primitives: List[SdfPrimitive],
    origins: np.ndarray,
    directions: np.ndarray,
    t_max: float,
    t_min: float = 0.0,
    max_steps: int = MAX_TRACE_STEPS,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns:
        (hit (R,) bool, t (R,)) 첫 교차 거리
    """
    origins = np.broadcast_to(origins, directions.shape)
    t = np.full(directions.shape[0], t_min)
    hit = np.zeros(directions.shape[0], dtype=bool)
    active = np.arange(directions.shape[0])
    for _ in range(max_steps):
        if active.size == 0:
            break
        dist = union_sdf(primitives, origins[active] + t[active, None] * directions[active])
        done = dist < SURFACE_EPS
        hit[active[done]] = True
        t[active[~done]] += dist[~done]
        active = active[~done & (t[active] <= t_max)]
    return hit, t


class SurfelScene:
    """
    Attributes:
        description: 장면 설명 (material 목록 포함)
        primitives: world 좌표 SdfPrimitive 목록
        positions / normals: (S, 3)
        albedo: (S, 3), roughness / metallic: (S,)
        material_ids: (S,)
    """

    def __init__(
        self,
        description: SceneDescription,
        primitives: List[SdfPrimitive],
        positions: np.ndarray,
        normals: np.ndarray,
        material_ids: np.ndarray,
    ):
        self.description = description
        self.primitives = primitives
        self.positions = positions
        self.normals = normals
        self.material_ids = material_ids
        materials = description.materials
        self.albedo = np.array([materials[i].albedo for i in material_ids], dtype=np.float64).reshape(-1, 3)
        self.roughness = np.array([materials[i].roughness for i in material_ids], dtype=np.float64)
        self.metallic = np.array([materials[i].metallic for i in material_ids], dtype=np.float64)
        self._visibility: Dict[bytes, np.ndarray] = {}

    @property
    def surfel_count(self) -> int:
        return self.positions.shape[0]

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return union_sdf(self.primitives, np.asarray(points, dtype=np.float64))

    def rotated(self, world_rotation: np.ndarray) -> "SurfelScene":
        """장면 전체를 world 회전 Q 로 회전 (description 은 그대로 유지)"""
        Q = np.asarray(world_rotation, dtype=np.float64)
        return SurfelScene(
            self.description,
            [p.rotated(Q) for p in self.primitives],
            self.positions @ Q.T,
            self.normals @ Q.T,
            self.material_ids,
        )

    def nearest_surfels(self, points: np.ndarray, chunk: int = 1024) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.zeros(points.shape[0], dtype=np.int64)
        sq = (self.positions**2).sum(axis=1)
        for start in range(0, points.shape[0], chunk):
            p = points[start : start + chunk]
            d2 = sq[None, :] - 2.0 * p @ self.positions.T
            out[start : start + chunk] = np.argmin(d2, axis=1)
        return out

    def occlusion(
        self, positions: np.ndarray, normals: np.ndarray, directions: np.ndarray, chunk: int = 65536
    ) -> np.ndarray:
        """
        (P, J) bool: 점 P 에서 방향 J 로 나간 ray 가 장면에 막히는지

        법선 반대쪽 방향은 계산하지 않고 False 로 둡니다.
        """
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        facing = normals @ directions.T > 0.0
        pi, ji = np.nonzero(facing)
        blocked = np.zeros(facing.shape, dtype=bool)
        for start in range(0, pi.size, chunk):
            p = pi[start : start + chunk]
            j = ji[start : start + chunk]
            origins = positions[p] + RAY_OFFSET * normals[p]
            hit, _ = sphere_trace(self.primitives, origins, directions[j], t_max=2.0, t_min=RAY_OFFSET)
            blocked[p[hit], j[hit]] = True
        return blocked

    def visibility(self, directions: np.ndarray) -> np.ndarray:
        """모든 surfel 의 occlusion (방향 집합별 cache)"""
        directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        key = directions.tobytes()
        if key not in self._visibility:
            logger.debug(
                f"Tracing visibility for {self.surfel_count} surfels x {directions.shape[0]} directions"
            )
            self._visibility[key] = self.occlusion(self.positions, self.normals, directions)
        return self._visibility[key]


def build_scene(description: SceneDescription) -> SurfelScene:
    """
    description 으로부터 surfel 을 샘플링 (결정적)

    다른 primitive 내부에 있는 샘플은 버리고, 남은 후보 중 정확히
    surfel_budget 개를 고릅니다.
    """
    rng = np.random.default_rng(description.seed)
    primitives = [SdfPrimitive.from_description(p, description) for p in description.primitives]
    budget = description.surfel_budget
    areas = np.array([p.area() for p in primitives])

    oversample = 1.0 if len(primitives) == 1 else 2.0
    for _ in range(8):
        counts = _split_counts(int(math.ceil(budget * oversample)), areas)
        points, normals, mats = [], [], []
        for index, (primitive, n) in enumerate(zip(primitives, counts)):
            p, nrm, local_y = primitive.sample(rng, int(n))
            others = [q for k, q in enumerate(primitives) if k != index]
            if others:
                keep = union_sdf(others, p) > SURFACE_EPS
                p, nrm, local_y = p[keep], nrm[keep], local_y[keep]
            top, bottom = primitive.materials
            points.append(p)
            normals.append(nrm)
            mats.append(np.where(local_y >= 0.0, top, bottom))
        points = np.concatenate(points)
        if points.shape[0] >= budget:
            break
        oversample *= 2.0
    else:
        raise GeometryError("could not place the requested number of surfels on the scene surface")

    normals = np.concatenate(normals)
    mats = np.concatenate(mats)
    chosen = np.sort(rng.choice(points.shape[0], size=budget, replace=False))
    normals = normals[chosen]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return SurfelScene(description, primitives, points[chosen], normals, mats[chosen])


def _random_materials(rng: np.random.Generator) -> List[Material]:
    first = Material(
        name="mat0",
        albedo=tuple(float(c) for c in rng.uniform(0.15, 0.9, size=3)),
        roughness=float(rng.uniform(0.35, 1.0)),
        metallic=0.0,
    )
    metallic = float(rng.uniform(0.3, 0.9)) if rng.random() < 0.5 else 0.0
    second = Material(
        name="mat1",
        albedo=tuple(float(c) for c in rng.uniform(0.15, 0.9, size=3)),
        roughness=float(rng.uniform(0.35, 1.0)),
        metallic=metallic,
    )
    return [first, second]


def _random_primitive(rng: np.random.Generator, kind: str, small: bool) -> Primitive:
    rotation = tuple(float(a) for a in rng.uniform(-180.0, 180.0, size=3))
    center = tuple(float(c) for c in rng.uniform(-0.12, 0.12, size=3)) if small else (0.0, 0.0, 0.0)
    materials = ["mat0", "mat1"] if rng.random() < 0.7 else ["mat0"]
    if kind == "sphere":
        size = [float(rng.uniform(0.14, 0.2) if small else rng.uniform(0.25, 0.35))]
    elif kind == "box":
        size = [float(s) for s in (rng.uniform(0.08, 0.14, 3) if small else rng.uniform(0.12, 0.25, 3))]
    else:
        major = float(rng.uniform(0.15, 0.2) if small else rng.uniform(0.22, 0.28))
        size = [major, float(rng.uniform(0.05, 0.07) if small else rng.uniform(0.07, 0.11))]
    return Primitive(kind=kind, center=center, size=size, rotation_deg=rotation, materials=materials)


def describe_scene(seed: int, kind: str, surfel_budget: int = 4096) -> SceneDescription:
    """
    Raises:
        ConfigError: 알 수 없는 kind
    """
    if kind not in SCENE_KINDS:
        raise ConfigError(f"Unknown scene kind '{kind}', expected one of {SCENE_KINDS}")
    rng = np.random.default_rng(seed)
    materials = _random_materials(rng)
    if kind == "composite":
        count = int(rng.integers(2, 4))
        kinds = [str(k) for k in rng.choice(["sphere", "box", "torus"], size=count)]
        primitives = [_random_primitive(rng, k, small=True) for k in kinds]
    else:
        primitives = [_random_primitive(rng, kind, small=False)]
    try:
        return SceneDescription(
            seed=seed, kind=kind, surfel_budget=surfel_budget, materials=materials, primitives=primitives
        )
    except ValidationError as e:
        raise ConfigError(f"Invalid generated scene: {e}") from e


def generate_scene(seed: int, kind: str, surfel_budget: int = 4096) -> SurfelScene:
    """
    seed 와 kind(sphere | box | torus | composite) 로 절차적 장면 생성

    같은 seed 는 항상 같은 장면을 만듭니다.
    """
    scene = build_scene(describe_scene(seed, kind, surfel_budget))
    logger.debug(f"Generated {kind} scene (seed={seed}) with {scene.surfel_count} surfels")
    return scene


def single_primitive_scene(
    primitive: Primitive, material: Optional[Material] = None, surfel_budget: int = 1024, seed: int = 0
) -> SurfelScene:
    """테스트와 CLI 에서 쓰는 단일 primitive 장면"""
    material = material or Material(name=primitive.materials[0], albedo=(0.5, 0.5, 0.5), roughness=1.0, metallic=0.0)
    primitive = primitive.model_copy(update={"materials": [material.name]})
    return build_scene(
        SceneDescription(seed=seed, surfel_budget=surfel_budget, materials=[material], primitives=[primitive])
    )
