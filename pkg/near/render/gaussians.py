"""
Gaussian primitive 집합과 EWA 투영

투영은 tape 연산으로 구성되어 center/scale/rotation 에 대한 gradient 가
자동으로 전파됩니다. 내부 계산은 float64 로 수행합니다.
"""

import logging
from typing import Dict, Optional

import numpy as np

from near.core.errors import RasterizerError
from near.core.tensor import (
    Tensor,
    TensorLike,
    as_tensor,
    cast,
    linear,
    matmul,
    precision,
    stack,
    where,
)
from near.render.camera import Camera

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-4
LOW_PASS = 0.3
SIGMA_CUTOFF = 3.0

FIELDS = (
    "means",
    "scales",
    "rotations",
    "opacity",
    "radiance",
    "basecolor",
    "roughness",
    "metallic",
    "shadow",
)


class GaussianSet:
    """
    렌더링 가능한 Gaussian 집합. 각 필드는 Tensor (gradient 전파 가능)

    Attributes:
        means: (G, 3) world 좌표 중심
        scales: (G, 3) 양수 축 scale
        rotations: (G, 4) 단위 quaternion (w, x, y, z)
        opacity: (G,) signed opacity [-1, 1]
        radiance: (G, 3) HDR radiance ≥ 0
        basecolor: (G, 3), roughness / metallic / shadow: (G,)
    """

    def __init__(
        self,
        means: TensorLike,
        scales: TensorLike,
        rotations: TensorLike,
        opacity: TensorLike,
        radiance: TensorLike,
        basecolor: Optional[TensorLike] = None,
        roughness: Optional[TensorLike] = None,
        metallic: Optional[TensorLike] = None,
        shadow: Optional[TensorLike] = None,
    ):
        self.means = as_tensor(means)
        g = self.means.shape[0]
        self.scales = as_tensor(scales)
        self.rotations = as_tensor(rotations)
        self.opacity = as_tensor(opacity)
        self.radiance = as_tensor(radiance)
        self.basecolor = as_tensor(basecolor if basecolor is not None else np.zeros((g, 3)))
        self.roughness = as_tensor(roughness if roughness is not None else np.zeros(g))
        self.metallic = as_tensor(metallic if metallic is not None else np.zeros(g))
        self.shadow = as_tensor(shadow if shadow is not None else np.zeros(g))
        self._check_shapes()

    def _check_shapes(self) -> None:
        g = self.means.shape[0]
        expected = {
            "means": (g, 3),
            "scales": (g, 3),
            "rotations": (g, 4),
            "opacity": (g,),
            "radiance": (g, 3),
            "basecolor": (g, 3),
            "roughness": (g,),
            "metallic": (g,),
            "shadow": (g,),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise RasterizerError(f"Gaussian field '{name}' has shape {actual}, expected {shape}")

    def __len__(self) -> int:
        return self.means.shape[0]

    def fields(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in FIELDS}

    def check_finite(self) -> None:
        for name, tensor in self.fields().items():
            if not tensor.is_finite:
                raise RasterizerError(f"Gaussian field '{name}' contains NaN or Inf")

    def permuted(self, order: np.ndarray) -> "GaussianSet":
        order = np.asarray(order)
        return GaussianSet(**{name: t.data[order] for name, t in self.fields().items()})


def quaternion_to_matrix(q: TensorLike) -> Tensor:
    """(G, 4) 단위 quaternion (w, x, y, z) → (G, 3, 3) 회전 행렬"""
    q = as_tensor(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r0 = stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    r1 = stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    r2 = stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return stack([r0, r1, r2], axis=-2)


class Projection:
    """
    투영 결과

    Attributes:
        mean2d: (G, 2) 픽셀 좌표 (float64 Tensor)
        conic: (G, 3) Σ_2D 역행렬의 (a, b, c) 성분
        cov2d: (G, 3) Σ_2D 의 (a, b, c) 성분
        depth: (G,) view depth
        radius: (G,) 3σ 화면 반경 (numpy, 미분 불가)
        culled: (G,) near plane 뒤에 있어 제외된 primitive
    """

    def __init__(self, mean2d, conic, cov2d, depth, radius, culled):
        self.mean2d = mean2d
        self.conic = conic
        self.cov2d = cov2d
        self.depth = depth
        self.radius = radius
        self.culled = culled


def project(gaussians: GaussianSet, camera: Camera) -> Projection:
    """
    EWA 투영: Σ_2D = J·W·Σ_3D·Wᵀ·Jᵀ + 0.3·I

    depth ≤ 1e-4 인 primitive 는 culled 로 표시됩니다 (오류 아님).
    모든 상수와 중간값은 float64 입니다.
    """
    with precision("float64"):
        return _project(gaussians, camera)


def _project(gaussians: GaussianSet, camera: Camera) -> Projection:
    means = cast(gaussians.means, np.float64)
    scales = cast(gaussians.scales, np.float64)
    rotations = cast(gaussians.rotations, np.float64)

    R = camera.rotation
    p_cam = linear(means, R.T, camera.translation)
    depth_raw = p_cam[:, 2]
    culled = depth_raw.data <= NEAR_PLANE
    z = where(culled, np.ones_like(depth_raw.data), depth_raw)
    x = p_cam[:, 0]
    y = p_cam[:, 1]
    fx, fy = camera.fx, camera.fy

    inv_z = 1.0 / z
    u = fx * x * inv_z + camera.cx
    v = fy * y * inv_z + camera.cy
    mean2d = stack([u, v], axis=-1)

    zeros = np.zeros(len(gaussians))
    j0 = stack([fx * inv_z, as_tensor(zeros), -fx * x * inv_z * inv_z], axis=-1)
    j1 = stack([as_tensor(zeros), fy * inv_z, -fy * y * inv_z * inv_z], axis=-1)
    J = stack([j0, j1], axis=-2)

    rot = quaternion_to_matrix(rotations)
    M = rot * scales.reshape(-1, 1, 3)
    A = matmul(matmul(J, R), M)
    At = A.swapaxes(-1, -2)
    cov = matmul(A, At)
    a = cov[:, 0, 0] + LOW_PASS
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + LOW_PASS
    det = a * c - b * b
    conic = stack([c / det, -b / det, a / det], axis=-1)

    ad, bd, cd = a.data, b.data, c.data
    mid = 0.5 * (ad + cd)
    lam = mid + np.sqrt(np.maximum(mid * mid - (ad * cd - bd * bd), 0.1))
    radius = np.ceil(SIGMA_CUTOFF * np.sqrt(lam))
    radius[culled] = 0.0
    return Projection(mean2d, conic, stack([a, b, c], axis=-1), depth_raw, radius, culled)
