"""
Structured 3D Latent (SLAT)

활성 voxel 좌표와 feature token 의 희소 집합. shaded 상태(Z_s)와
lighting-homogenized 상태(Z_lh) 모두 같은 구조를 사용합니다.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from near.core.errors import GeometryError, SlatError
from near.render.camera import Camera

logger = logging.getLogger(__name__)


def coord_keys(coords: np.ndarray, grid_resolution: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    n = grid_resolution
    return (coords[:, 0] * n + coords[:, 1]) * n + coords[:, 2]


class Slat:
    """
    Attributes:
        grid_resolution: 축당 해상도 N
        coords: (K, 3) int, [0, N)³, 사전순 정렬 + 중복 없음
        feats: (K, D) float32
        basecolor_feats: (K, D_bc) 또는 None
    """

    def __init__(
        self,
        grid_resolution: int,
        coords: np.ndarray,
        feats: np.ndarray,
        basecolor_feats: Optional[np.ndarray] = None,
    ):
        self.grid_resolution = int(grid_resolution)
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        self.feats = np.asarray(feats, dtype=np.float32)
        self.basecolor_feats = (
            None if basecolor_feats is None else np.asarray(basecolor_feats, dtype=np.float32)
        )
        self.validate()

    def validate(self) -> None:
        """
        Raises:
            SlatError: 불변 조건 위반
        """
        n = self.grid_resolution
        k = self.coords.shape[0]
        if n < 1:
            raise SlatError(f"grid resolution must be positive, got {n}")
        if k < 1:
            raise SlatError("a SLAT needs at least one active voxel")
        if self.coords.min() < 0 or self.coords.max() >= n:
            raise SlatError(f"coordinates outside [0, {n})")
        keys = coord_keys(self.coords, n)
        diffs = np.diff(keys)
        if np.any(diffs == 0):
            raise SlatError("duplicate voxel coordinates")
        if np.any(diffs < 0):
            raise SlatError("voxel coordinates are not sorted lexicographically")
        if self.feats.ndim != 2 or self.feats.shape[0] != k:
            raise SlatError(f"feature rows {self.feats.shape} do not match K={k}")
        if self.basecolor_feats is not None and (
            self.basecolor_feats.ndim != 2 or self.basecolor_feats.shape[0] != k
        ):
            raise SlatError("basecolor feature rows do not match K")

    @property
    def num_tokens(self) -> int:
        return self.coords.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.feats.shape[1]

    @property
    def basecolor_dim(self) -> int:
        return 0 if self.basecolor_feats is None else self.basecolor_feats.shape[1]

    def voxel_centers(self) -> np.ndarray:
        return voxel_centers(self.coords, self.grid_resolution)

    def with_feats(
        self, feats: np.ndarray, basecolor_feats: Optional[np.ndarray] = None
    ) -> "Slat":
        if basecolor_feats is None:
            basecolor_feats = self.basecolor_feats
        return Slat(self.grid_resolution, self.coords, feats, basecolor_feats)

    def same_coords(self, other: "Slat") -> bool:
        return self.grid_resolution == other.grid_resolution and np.array_equal(
            self.coords, other.coords
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Slat):
            return NotImplemented
        if not self.same_coords(other):
            return False
        if (self.basecolor_feats is None) != (other.basecolor_feats is None):
            return False
        if self.basecolor_feats is not None and not np.array_equal(
            self.basecolor_feats, other.basecolor_feats
        ):
            return False
        return np.array_equal(self.feats, other.feats)

    def __repr__(self) -> str:
        bc = f", D_bc={self.basecolor_dim}" if self.basecolor_feats is not None else ""
        return f"Slat(N={self.grid_resolution}, K={self.num_tokens}, D={self.feature_dim}{bc})"


def voxel_centers(coords: np.ndarray, grid_resolution: int) -> np.ndarray:
    """p = (coord + 0.5) / N − 0.5"""
    return (np.asarray(coords, dtype=np.float64) + 0.5) / grid_resolution - 0.5


def voxelize_surface(points: np.ndarray, grid_resolution: int) -> np.ndarray:
    """
    [−0.5, 0.5]³ 안의 점들을 정렬된 고유 voxel 좌표로 변환

    Args:
        points: (P, 3)
        grid_resolution: N

    Returns:
        np.ndarray: (K, 3) int64, 사전순 정렬

    Raises:
        GeometryError: 빈 점 집합
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        raise GeometryError("voxelize_surface received an empty point set")
    outside = np.any((points < -0.5) | (points > 0.5), axis=1)
    if np.any(outside):
        logger.warning(f"{int(outside.sum())} points outside the scene box were clamped")
    coords = np.floor((points + 0.5) * grid_resolution).astype(np.int64)
    coords = np.clip(coords, 0, grid_resolution - 1)
    return np.unique(coords, axis=0)


# ----------------------------------------------------------------------
# Multi-view back-projection
# ----------------------------------------------------------------------
def _first_hit_distances(
    origin: np.ndarray,
    directions: np.ndarray,
    box_min: np.ndarray,
    box_max: np.ndarray,
) -> np.ndarray:
    """
    Slab test: ray (origin, directions[i]) 와 모든 cube j 의 진입 거리

    Returns:
        (R, K) 진입 거리, 교차하지 않으면 inf
    """
    d = np.where(np.abs(directions) < 1e-12, 1e-12, directions)
    inv = 1.0 / d
    t1 = (box_min[None, :, :] - origin) * inv[:, None, :]
    t2 = (box_max[None, :, :] - origin) * inv[:, None, :]
    t_near = np.minimum(t1, t2).max(axis=2)
    t_far = np.maximum(t1, t2).min(axis=2)
    hit = (t_near <= t_far) & (t_far > 0.0)
    return np.where(hit, np.maximum(t_near, 0.0), np.inf)


def voxel_visibility(
    coords: np.ndarray, grid_resolution: int, camera: Camera, chunk: int = 256
) -> np.ndarray:
    """
    각 voxel 중심이 카메라에서 보이는지 (voxel 을 solid cube 로 취급, nearest-hit wins)

    자신보다 진입 거리가 엄격하게 작은 다른 cube 가 있으면 가려진 것으로 봅니다.
    """
    coords = np.asarray(coords, dtype=np.int64)
    n = grid_resolution
    centers = voxel_centers(coords, n)
    box_min = coords / n - 0.5
    box_max = (coords + 1) / n - 0.5
    origin = camera.position

    k = coords.shape[0]
    visible = np.zeros(k, dtype=bool)
    depth = camera.world_to_camera(centers)[:, 2]
    for start in range(0, k, chunk):
        idx = np.arange(start, min(start + chunk, k))
        rays = centers[idx] - origin
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        dist = _first_hit_distances(origin, rays, box_min, box_max)
        own = dist[np.arange(idx.size), idx]
        dist[np.arange(idx.size), idx] = np.inf
        visible[idx] = ~np.any(dist < own[:, None], axis=1)
    return visible & (depth > 0.0)


def _lookup_pixel(
    u: int, v: int, coverage: Optional[np.ndarray], width: int, height: int
) -> Optional[Tuple[int, int]]:
    if coverage is None or coverage[v, u]:
        return v, u
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            vv, uu = v + dv, u + du
            if 0 <= vv < height and 0 <= uu < width and coverage[vv, uu]:
                return vv, uu
    return None


def aggregate_features(
    feature_images: Sequence[np.ndarray],
    cameras: Sequence[Camera],
    coords: np.ndarray,
    grid_resolution: int,
    coverages: Optional[Sequence[np.ndarray]] = None,
    basecolor_images: Optional[Sequence[np.ndarray]] = None,
) -> Slat:
    """
    multi-view feature 를 voxel 로 back-projection 하여 평균

    Args:
        feature_images: V 개의 (H, W, C) feature 이미지
        cameras: 각 view 의 카메라
        coords: 정렬된 voxel 좌표 (K, 3)
        grid_resolution: N
        coverages: V 개의 (H, W) foreground mask (없으면 전체를 foreground 로 취급)
        basecolor_images: V 개의 (H, W, C_bc) basecolor feature 이미지 (선택)

    Returns:
        Slat: 어느 view 에서도 보이지 않는 voxel 은 0 feature

    Raises:
        GeometryError: view 가 없거나 카메라가 모든 voxel 뒤에 있는 경우
    """
    if len(feature_images) == 0 or len(feature_images) != len(cameras):
        raise GeometryError("aggregate_features needs at least one view with a camera")
    coords = np.asarray(coords, dtype=np.int64)
    k = coords.shape[0]
    channels = feature_images[0].shape[-1]
    bc_channels = basecolor_images[0].shape[-1] if basecolor_images is not None else 0

    sums = np.zeros((k, channels), dtype=np.float64)
    bc_sums = np.zeros((k, bc_channels), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    centers = voxel_centers(coords, grid_resolution)

    for view, (image, camera) in enumerate(zip(feature_images, cameras)):
        uv, depth = camera.project_points(centers)
        if np.all(depth <= 0.0):
            raise GeometryError(f"camera of view {view} is behind all voxels")
        visible = voxel_visibility(coords, grid_resolution, camera)
        coverage = None if coverages is None else np.asarray(coverages[view], dtype=bool)
        pix = np.floor(uv).astype(np.int64)
        for i in np.nonzero(visible)[0]:
            u, v = pix[i]
            if not (0 <= u < camera.width and 0 <= v < camera.height):
                continue
            hit = _lookup_pixel(u, v, coverage, camera.width, camera.height)
            if hit is None:
                continue
            sums[i] += image[hit]
            if basecolor_images is not None:
                bc_sums[i] += basecolor_images[view][hit]
            counts[i] += 1

    unseen = int((counts == 0).sum())
    if unseen:
        logger.warning(f"{unseen} of {k} voxels were visible in no view; using zero features")
    denom = np.maximum(counts, 1)[:, None]
    feats = (sums / denom).astype(np.float32)
    bc = (bc_sums / denom).astype(np.float32) if basecolor_images is not None else None
    return Slat(grid_resolution, coords, feats, bc)
