"""
Tests for cameras, Gaussian projection and the tile rasterizer
"""

import time

import numpy as np
import pytest

from near.core.errors import GeometryError, RasterizerError
from near.core.gradcheck import grad_check
from near.core.tensor import Tape, Tensor, tsum
from near.render.camera import Camera, is_orthonormal, parse_camera_spec
from near.render.gaussians import GaussianSet, project, quaternion_to_matrix
from near.render.rasterizer import rasterize, rasterize_grad, rasterize_reference, render_aux

SIZE = 12


def _camera(size=SIZE):
    return Camera.orbit(0.0, 0.0, 3.0, fov_deg=40.0, width=size, height=size)


def _gaussians(rng, count=5, requires_grad=False, opacity=None):
    def t(data):
        return Tensor(data, requires_grad=requires_grad)

    q = rng.normal(size=(count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        means=t(rng.uniform(-0.25, 0.25, size=(count, 3))),
        scales=t(rng.uniform(0.05, 0.15, size=(count, 3))),
        rotations=t(q),
        opacity=t(rng.uniform(0.3, 0.9, size=count) if opacity is None else opacity),
        radiance=t(rng.uniform(0.0, 2.0, size=(count, 3))),
        basecolor=t(rng.uniform(0.0, 1.0, size=(count, 3))),
        roughness=t(rng.uniform(0.0, 1.0, size=count)),
        metallic=t(rng.uniform(0.0, 1.0, size=count)),
        shadow=t(rng.uniform(0.0, 1.0, size=count)),
    )


def _single(mean, radiance, opacity, scale=0.2):
    return GaussianSet(
        means=np.array([mean], dtype=np.float64),
        scales=np.full((1, 3), scale),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        opacity=np.array([opacity]),
        radiance=np.array([radiance], dtype=np.float64),
    )


def _concat(*sets):
    fields = {}
    for name in sets[0].fields():
        fields[name] = np.concatenate([getattr(s, name).numpy() for s in sets])
    return GaussianSet(**fields)


class TestCamera:
    """카메라 모델"""

    def test_orbit_position(self):
        camera = Camera.orbit(90.0, 0.0, 2.0)
        np.testing.assert_allclose(camera.position, [2.0, 0.0, 0.0], atol=1e-12)
        assert is_orthonormal(camera.rotation)

    def test_origin_projects_to_center(self):
        uv, depth = _camera().project_points(np.zeros((1, 3)))
        np.testing.assert_allclose(uv, [[SIZE / 2, SIZE / 2]])
        assert depth[0] == pytest.approx(3.0)

    def test_with_resolution(self):
        camera = _camera().with_resolution(20, 10)
        assert (camera.width, camera.height) == (20, 10)

    def test_invalid_fov(self):
        with pytest.raises(GeometryError, match="fov"):
            Camera(np.eye(3), np.zeros(3), fov_deg=180.0)

    def test_non_orthonormal_rotation(self):
        with pytest.raises(GeometryError, match="orthonormal"):
            Camera(np.eye(3) * 2.0, np.zeros(3))

    def test_look_at_parallel_up(self):
        with pytest.raises(GeometryError, match="parallel"):
            Camera.look_at((0.0, 3.0, 0.0))

    def test_parse_camera_spec(self):
        camera = parse_camera_spec("0,0,2.5", 40.0, 8, 8)
        np.testing.assert_allclose(camera.position, [0.0, 0.0, 2.5], atol=1e-12)
        with pytest.raises(GeometryError, match="yaw,pitch,radius"):
            parse_camera_spec("0,0", 40.0, 8, 8)


class TestProjection:
    """EWA 투영"""

    def test_identity_quaternion(self, float64):
        np.testing.assert_allclose(quaternion_to_matrix(np.array([[1.0, 0, 0, 0]])).numpy()[0], np.eye(3))

    def test_behind_camera_is_culled(self, float64):
        gaussians = _single([0.0, 0.0, 4.0], [1.0, 1.0, 1.0], 0.9)
        assert project(gaussians, _camera()).culled.tolist() == [True]

    def test_low_pass_keeps_covariance_invertible(self, float64):
        gaussians = _single([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.9, scale=1e-9)
        proj = project(gaussians, _camera())
        np.testing.assert_allclose(proj.cov2d.numpy()[0], [0.3, 0.0, 0.3], atol=1e-9)


class TestRasterize:
    """forward 합성"""

    def test_frame_maps(self, float64, rng):
        frame = rasterize(_gaussians(rng), _camera())
        maps = frame.numpy()
        assert maps["hdr"].shape == (SIZE, SIZE, 3)
        assert maps["basecolor"].shape == (SIZE, SIZE, 3)
        for name in ("alpha", "roughness", "metallic", "shadow", "depth"):
            assert maps[name].shape == (SIZE, SIZE)
        assert 0.0 <= maps["alpha"].min() and maps["alpha"].max() <= 1.0

    def test_output_dtype_follows_precision(self, rng):
        frame = rasterize(_gaussians(rng), _camera())
        assert frame.hdr.dtype == np.float32

    def test_front_primitive_wins(self, float64):
        front = _single([0.0, 0.0, 0.5], [1.0, 0.0, 0.0], 0.99, scale=0.5)
        back = _single([0.0, 0.0, -0.5], [0.0, 1.0, 0.0], 0.99, scale=0.5)
        for gaussians in (_concat(front, back), _concat(back, front)):
            hdr = rasterize(gaussians, _camera()).numpy()["hdr"]
            center = hdr[SIZE // 2, SIZE // 2]
            assert center[0] > 0.9 and center[1] < 0.05

    def test_depth_ties_follow_primitive_order(self, float64):
        first = _single([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.99, scale=0.3)
        second = _single([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.99, scale=0.3)
        center = rasterize(_concat(first, second), _camera()).numpy()["hdr"][SIZE // 2, SIZE // 2]
        assert center[0] > center[1]

    @pytest.mark.parametrize("seed", range(50))
    def test_tiles_match_reference(self, float64, seed):
        """tile 합성 == 전역 정렬 픽셀 루프 (모든 채널)"""
        rng = np.random.default_rng(seed)
        gaussians = _gaussians(rng, count=int(rng.integers(2, 160)))
        yaw, pitch = rng.uniform(-180.0, 180.0), rng.uniform(-30.0, 30.0)
        camera = Camera.orbit(float(yaw), float(pitch), 3.0, 40.0, 16, 16)
        tiled = rasterize(gaussians, camera, tile_size=int(rng.choice([4, 8, 16]))).numpy()
        reference = rasterize_reference(gaussians, camera)
        for name, value in reference.items():
            np.testing.assert_allclose(tiled[name], value, rtol=0.0, atol=1e-6, err_msg=name)

    def test_two_gaussians_closed_form(self, float64):
        """C = c1·a1 + c2·a2·(1 − a1) at the pixel under both means"""
        c1, c2 = np.array([1.0, 0.5, 0.0]), np.array([0.0, 0.2, 1.0])
        gaussians = _concat(_single([0.0, 0.0, -0.2], c2, 0.5), _single([0.0, 0.0, 0.2], c1, 0.6))
        camera = _camera(size=9)
        for maps in (rasterize(gaussians, camera).numpy(), rasterize_reference(gaussians, camera)):
            np.testing.assert_allclose(maps["hdr"][4, 4], c1 * 0.6 + c2 * 0.5 * 0.4, rtol=1e-12)
            assert maps["alpha"][4, 4] == pytest.approx(0.6 + 0.5 * 0.4, rel=1e-12)
            assert maps["depth"][4, 4] == pytest.approx(0.6 * 2.8 + 0.2 * 3.2, rel=1e-12)

    def test_three_gaussians_closed_form(self, float64):
        c1, c2, c3 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.3, 0.3, 2.0])
        gaussians = _concat(
            _single([0.0, 0.0, 0.0], c2, 0.5),
            _single([0.0, 0.0, -0.3], c3, 0.4),
            _single([0.0, 0.0, 0.3], c1, 0.7),
        )
        expected = c1 * 0.7 + c2 * 0.5 * 0.3 + c3 * 0.4 * 0.3 * 0.5
        camera = _camera(size=9)
        for maps in (rasterize(gaussians, camera).numpy(), rasterize_reference(gaussians, camera)):
            np.testing.assert_allclose(maps["hdr"][4, 4], expected, rtol=1e-12)
            assert maps["alpha"][4, 4] == pytest.approx(1.0 - 0.3 * 0.5 * 0.6, rel=1e-12)

    def test_saturated_pixel_stops_blending(self, float64):
        """투과율이 TRANSMIT_MIN 아래면 뒤쪽 primitive 는 기여하지 않음"""
        front = _single([0.0, 0.0, 0.3], [1.0, 0.0, 0.0], 0.99999)
        back = _single([0.0, 0.0, -0.3], [0.0, 1.0, 0.0], 0.9)
        gaussians, camera = _concat(front, back), _camera(size=9)
        for maps in (rasterize(gaussians, camera).numpy(), rasterize_reference(gaussians, camera)):
            assert maps["hdr"][4, 4, 1] == 0.0
            assert maps["hdr"][4, 4, 0] == pytest.approx(0.99999, rel=1e-12)

    def test_threads_are_deterministic(self, float64, rng):
        gaussians = _gaussians(rng, count=12)
        single = rasterize(gaussians, _camera(20), tile_size=4, threads=1).numpy()
        multi = rasterize(gaussians, _camera(20), tile_size=4, threads=4).numpy()
        for name in single:
            np.testing.assert_array_equal(single[name], multi[name])

    def test_negative_opacity_never_amplifies(self, float64):
        """음수 opacity 뒤의 primitive 는 투과율 1 을 넘지 않음"""
        camera = _camera()
        back = _single([0.0, 0.0, -0.5], [0.0, 1.0, 0.0], 0.8, scale=0.3)
        darkener = _single([0.0, 0.0, 0.5], [0.0, 0.0, 0.0], -0.5, scale=0.3)
        alone = rasterize(back, camera).numpy()["hdr"]
        both = rasterize(_concat(darkener, back), camera).numpy()["hdr"]
        np.testing.assert_allclose(both, alone, atol=1e-12)

    def test_background(self, float64):
        far = _single([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.5, scale=0.02)
        hdr = rasterize(far, _camera(), background=(0.1, 0.2, 0.3)).numpy()["hdr"]
        np.testing.assert_allclose(hdr[0, 0], [0.1, 0.2, 0.3])

    def test_empty_set(self, float64):
        empty = GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))
        frame = rasterize(empty, _camera(), background=(1.0, 1.0, 1.0))
        np.testing.assert_array_equal(frame.numpy()["alpha"], 0.0)
        np.testing.assert_array_equal(frame.numpy()["hdr"], 1.0)

    def test_everything_culled(self, float64):
        behind = _single([0.0, 0.0, 4.0], [1.0, 1.0, 1.0], 0.9)
        np.testing.assert_array_equal(rasterize(behind, _camera()).numpy()["alpha"], 0.0)

    def test_non_finite_parameters(self, float64):
        bad = _single([np.nan, 0.0, 0.0], [1.0, 1.0, 1.0], 0.9)
        with pytest.raises(RasterizerError, match="NaN"):
            rasterize(bad, _camera())

    def test_field_shape_mismatch(self):
        with pytest.raises(RasterizerError, match="shape"):
            GaussianSet(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(3), np.zeros((2, 3)))

    def test_render_aux(self, float64, rng):
        aux = render_aux(_gaussians(rng), _camera())
        assert set(aux) == {"basecolor", "roughness", "metallic", "shadow", "depth"}


class TestRasterizeBackward:
    """analytic backward 대 finite difference"""

    @pytest.mark.parametrize("name", ["hdr", "alpha", "depth", "basecolor"])
    def test_gradient_check(self, float64, name):
        rng = np.random.default_rng(7)
        gaussians = _gaussians(rng, count=4, requires_grad=True)
        inputs = [gaussians.means, gaussians.scales, gaussians.rotations, gaussians.opacity,
                  gaussians.radiance, gaussians.basecolor]
        err = grad_check(lambda: getattr(rasterize(gaussians, _camera(8)), name), inputs, max_coords=8)
        assert err < 1e-5

    def test_gradient_check_signed_opacity(self, float64):
        rng = np.random.default_rng(3)
        gaussians = _gaussians(rng, count=3, requires_grad=True, opacity=np.array([-0.4, 0.6, 0.7]))
        err = grad_check(lambda: rasterize(gaussians, _camera(8)).hdr, [gaussians.opacity, gaussians.means])
        assert err < 1e-5

    def test_rasterize_grad_matches_tape(self, float64, rng):
        gaussians = _gaussians(rng, count=4, requires_grad=True)
        cotangent = rng.normal(size=(SIZE, SIZE, 3))
        frame = rasterize(gaussians, _camera(), retain_graph=True)
        grads = rasterize_grad(frame, {"hdr": cotangent})
        expected = grads["means"].copy()

        gaussians.means.zero_grad()
        with Tape() as tape:
            loss = tsum(rasterize(gaussians, _camera()).hdr * cotangent)
        tape.backward(loss)
        np.testing.assert_allclose(gaussians.means.grad, expected, atol=1e-12)

    def test_rasterize_grad_needs_forward_cache(self, float64, rng):
        frame = rasterize(_gaussians(rng, requires_grad=True), _camera())
        with pytest.raises(RasterizerError, match="retain_graph"):
            rasterize_grad(frame, {"hdr": np.zeros((SIZE, SIZE, 3))})

    def test_rasterize_grad_unknown_map(self, float64, rng):
        frame = rasterize(_gaussians(rng, requires_grad=True), _camera(), retain_graph=True)
        with pytest.raises(RasterizerError, match="Unknown frame map"):
            rasterize_grad(frame, {"normal": np.zeros((SIZE, SIZE, 3))})


class TestThroughput:
    """렌더 속도"""

    @pytest.mark.slow
    def test_twenty_thousand_gaussians_at_128(self):
        """20k Gaussian 표면, 128×128: 5 fps 이상"""
        rng = np.random.default_rng(0)
        count = 20000
        normals = rng.normal(size=(count, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        q = rng.normal(size=(count, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        gaussians = GaussianSet(
            means=0.4 * normals,
            scales=rng.uniform(0.01, 0.03, size=(count, 3)),
            rotations=q,
            opacity=rng.uniform(0.5, 1.0, size=count),
            radiance=rng.uniform(0.0, 2.0, size=(count, 3)),
        )
        camera = Camera.orbit(30.0, 15.0, 2.0, 40.0, 128, 128)
        rasterize(gaussians, camera)

        frames = 5
        start = time.perf_counter()
        for _ in range(frames):
            frame = rasterize(gaussians, camera)
        fps = frames / (time.perf_counter() - start)
        assert frame.numpy()["alpha"].max() > 0.99
        assert fps >= 5.0, f"{fps:.2f} fps"
