"""
Pinhole 카메라 (OpenCV 규약: x 오른쪽, y 아래, +z 전방)

extrinsic 은 world→camera 변환 x_c = R·x_w + t 입니다. 픽셀 (u, v) 의
중심은 (u + 0.5, v + 0.5) 에 있습니다.
"""

import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from near.core.errors import GeometryError

logger = logging.getLogger(__name__)

DEFAULT_FOV_DEG = 40.0
DEFAULT_RADIUS = 2.0
WORLD_UP = np.array([0.0, 1.0, 0.0])


def is_orthonormal(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=np.float64)
    return R.shape == (3, 3) and bool(np.allclose(R.T @ R, np.eye(3), atol=tol))


def rotation_y(angle_rad: float) -> np.ndarray:
    """Rotation about the world up axis (+Y)."""
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_from_euler(rx: float, ry: float, rz: float) -> np.ndarray:
    """XYZ 순서 오일러 각(라디안)으로부터 회전 행렬"""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


class Camera:
    """
    Args:
        rotation: world→camera 회전 R (3×3, orthonormal)
        translation: world→camera 이동 t
        fov_deg: 수직 화각 (0, 180)
        width, height: 이미지 크기 (픽셀)

    Raises:
        GeometryError: 화각 범위 밖, 회전 행렬이 orthonormal 이 아님, 크기가 0 이하
    """

    def __init__(
        self,
        rotation: np.ndarray,
        translation: np.ndarray,
        fov_deg: float = DEFAULT_FOV_DEG,
        width: int = 64,
        height: int = 64,
    ):
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64).reshape(3)
        if not 0.0 < fov_deg < 180.0:
            raise GeometryError(f"fov must be in (0, 180) degrees, got {fov_deg}")
        if not is_orthonormal(rotation, tol=1e-6):
            raise GeometryError("camera rotation is not orthonormal")
        if width < 1 or height < 1:
            raise GeometryError(f"invalid image size {width}x{height}")
        self.rotation = rotation
        self.translation = translation
        self.fov_deg = float(fov_deg)
        self.width = int(width)
        self.height = int(height)

    @property
    def fy(self) -> float:
        return (self.height / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def fx(self) -> float:
        return self.fy

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            (uv, depth): 연속 픽셀 좌표 (픽셀 중심 = 정수 + 0.5) 와 카메라 z
        """
        pc = self.world_to_camera(points)
        depth = pc[..., 2]
        safe = np.where(np.abs(depth) < 1e-12, 1e-12, depth)
        u = self.fx * pc[..., 0] / safe + self.cx
        v = self.fy * pc[..., 1] / safe + self.cy
        return np.stack([u, v], axis=-1), depth

    def pixel_rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            (origin (3,), directions (H, W, 3)) world 좌표 단위 ray
        """
        us = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        vs = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        grid_u, grid_v = np.meshgrid(us, vs)
        dirs = np.stack([grid_u, grid_v, np.ones_like(grid_u)], axis=-1)
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        return self.position, dirs @ self.rotation

    def transformed(self, world_rotation: np.ndarray) -> "Camera":
        """world 가 Q 로 회전했을 때 같은 상대 시점을 유지하는 카메라"""
        Q = np.asarray(world_rotation, dtype=np.float64)
        return Camera(self.rotation @ Q.T, self.translation, self.fov_deg, self.width, self.height)

    def with_resolution(self, width: int, height: int) -> "Camera":
        return Camera(self.rotation, self.translation, self.fov_deg, width, height)

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float] = (0.0, 0.0, 0.0),
        up: Sequence[float] = (0.0, 1.0, 0.0),
        fov_deg: float = DEFAULT_FOV_DEG,
        width: int = 64,
        height: int = 64,
    ) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise GeometryError("camera eye coincides with its target")
        forward /= norm
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise GeometryError("camera forward direction is parallel to the up vector")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(R, -R @ eye, fov_deg, width, height)

    @classmethod
    def orbit(
        cls,
        yaw_deg: float,
        pitch_deg: float,
        radius: float = DEFAULT_RADIUS,
        fov_deg: float = DEFAULT_FOV_DEG,
        width: int = 64,
        height: int = 64,
        target: Optional[Sequence[float]] = None,
    ) -> "Camera":
        """원점을 바라보는 구면 궤도 카메라 (yaw 0, pitch 0 은 +Z 축 위)"""
        yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
        center = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
        eye = center + radius * np.array(
            [math.cos(pitch) * math.sin(yaw), math.sin(pitch), math.cos(pitch) * math.cos(yaw)]
        )
        return cls.look_at(eye, center, WORLD_UP, fov_deg, width, height)

    def __repr__(self) -> str:
        p = self.position
        return (
            f"Camera(pos=({p[0]:.3f}, {p[1]:.3f}, {p[2]:.3f}), fov={self.fov_deg}, "
            f"{self.width}x{self.height})"
        )


def parse_camera_spec(spec: str, fov_deg: float, width: int, height: int) -> Camera:
    """'yaw,pitch,radius' 문자열을 카메라로 변환"""
    try:
        yaw, pitch, radius = (float(part) for part in spec.split(","))
    except ValueError as e:
        raise GeometryError(f"camera spec must be 'yaw,pitch,radius', got '{spec}'") from e
    return Camera.orbit(yaw, pitch, radius, fov_deg, width, height)
