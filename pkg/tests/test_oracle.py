"""
Tests for the procedural scenes and the analytic shading oracle
"""

import math

import numpy as np
import pytest

from near.core.errors import ConfigError
from near.lighting.envmap import make_environment, rotate_envmap_yaw, yaw_rotation
from near.losses.metrics import ssim
from near.losses.tonemap import tonemap_agx
from near.oracle.scene import SCENE_KINDS, describe_scene, generate_scene, single_primitive_scene
from near.oracle.shading import (
    ORACLE_MAPS,
    HomogenizedLight,
    blinn_phong_exponent,
    env_irradiance,
    render_homogenized,
    render_reference,
    shade_surfel,
)
from near.render.camera import Camera
from near.schemas.scene import Material, Primitive


@pytest.fixture(scope="module")
def sphere():
    return single_primitive_scene(Primitive(kind="sphere", size=[0.3], materials=["grey"]), surfel_budget=512)


def _camera(size=16):
    return Camera.orbit(0.0, 0.0, 3.0, 40.0, size, size)


class TestScenes:
    """절차적 장면"""

    @pytest.mark.parametrize("kind", SCENE_KINDS)
    def test_exact_surfel_budget(self, kind):
        scene = generate_scene(11, kind, surfel_budget=300)
        assert scene.surfel_count == 300
        np.testing.assert_allclose(np.linalg.norm(scene.normals, axis=1), 1.0)

    def test_deterministic(self):
        assert describe_scene(4, "composite") == describe_scene(4, "composite")
        a = generate_scene(4, "torus", 200)
        b = generate_scene(4, "torus", 200)
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="Unknown scene kind"):
            describe_scene(0, "teapot")

    def test_surfels_lie_on_surface(self, sphere):
        np.testing.assert_allclose(np.linalg.norm(sphere.positions, axis=1), 0.3, atol=1e-9)
        assert np.all(np.abs(sphere.sdf(sphere.positions)) < 1e-6)

    def test_occlusion(self, sphere):
        """구 아래 점에서 위쪽 ray 만 막힘"""
        point = np.array([[0.0, -0.6, 0.0]])
        normal = np.array([[0.0, 1.0, 0.0]])
        directions = np.array([[0.0, 1.0, 0.0], [0.8, 0.6, 0.0], [0.0, -1.0, 0.0]])
        blocked = sphere.occlusion(point, normal, directions)
        assert blocked.tolist() == [[True, False, False]]


class TestShading:
    """해석적 shading"""

    def test_blinn_phong_exponent(self):
        np.testing.assert_allclose(blinn_phong_exponent(np.array([1.0, 0.5])), [0.0, 6.0])

    @pytest.mark.parametrize("normal", [[0.0, 1.0, 0.0], [0.3, 0.8, 0.52], [-0.6, -0.2, 0.77]])
    def test_uniform_irradiance(self, normal):
        """균일 조명 c 의 cosine 적분은 π·c (H = 64)"""
        env = make_environment(0, "uniform", height=64, uniform_value=2.0)
        normal = np.asarray(normal) / np.linalg.norm(normal)
        np.testing.assert_allclose(env_irradiance(env, normal), 2.0 * math.pi, rtol=0.005)

    def test_irradiance_follows_joint_rotation(self):
        """환경맵과 법선을 같은 R 로 돌리면 irradiance 는 그대로"""
        env = make_environment(3, "sky", height=64)
        angle = 2.0 * math.pi * 5 / env.width
        normal = np.array([0.4, 0.7, -0.59])
        normal /= np.linalg.norm(normal)
        before = env_irradiance(env, normal)
        after = env_irradiance(rotate_envmap_yaw(env, angle), yaw_rotation(angle) @ normal)
        np.testing.assert_allclose(after, before, rtol=1e-3)

    @pytest.mark.parametrize("value", [0.2, 0.5, 0.9])
    def test_white_furnace_returns_albedo(self, value):
        """E = 1, metallic 0, roughness 1 이면 출력은 albedo"""
        env = make_environment(0, "uniform", height=64)
        view = np.array([0.3, 0.9, 0.3])
        value_rgb = shade_surfel(
            np.zeros(3),
            np.array([0.0, 1.0, 0.0]),
            np.full(3, value),
            1.0,
            0.0,
            view / np.linalg.norm(view),
            env,
            env_height=64,
        )
        np.testing.assert_allclose(value_rgb, value, rtol=0.02)

    def test_view_direction_irrelevant_without_specular(self):
        env = make_environment(5, "sky", height=16)
        args = (np.zeros(3), np.array([0.0, 0.0, 1.0]), np.array([0.7, 0.4, 0.2]), 0.3, 0.0)
        front = shade_surfel(*args, np.array([0.0, 0.0, 1.0]), env, env_height=8)
        grazing = shade_surfel(*args, np.array([0.8, 0.0, 0.6]), env, env_height=8)
        np.testing.assert_array_equal(front, grazing)

    def test_specular_weight_adds_highlight(self):
        """dielectric specular 는 specular_weight > 0 일 때만 시점에 의존"""
        env = make_environment(5, "sky", height=16)
        args = (np.zeros(3), np.array([0.0, 0.0, 1.0]), np.array([0.7, 0.4, 0.2]), 0.3, 0.0)
        front = shade_surfel(*args, np.array([0.0, 0.0, 1.0]), env, env_height=8, specular_weight=1.0)
        grazing = shade_surfel(*args, np.array([0.8, 0.0, 0.6]), env, env_height=8, specular_weight=1.0)
        assert not np.allclose(front, grazing)

    def test_surfel_inside_box_is_black(self):
        """모든 방향이 막힌 surfel 은 0"""
        box = single_primitive_scene(Primitive(kind="box", size=[0.5, 0.5, 0.5], materials=["grey"]), surfel_budget=64)
        env = make_environment(0, "uniform", height=16)
        value = shade_surfel(
            np.zeros(3),
            np.array([0.0, 1.0, 0.0]),
            np.full(3, 0.5),
            1.0,
            0.0,
            np.array([0.0, 1.0, 0.0]),
            env,
            scene=box,
            env_height=8,
        )
        np.testing.assert_array_equal(value, 0.0)
    def test_metal_reflects_albedo(self):
        """metallic 1 이면 diffuse 가 없고 F0 = albedo"""
        env = make_environment(0, "uniform", height=32)
        value = shade_surfel(
            np.zeros(3),
            np.array([0.0, 1.0, 0.0]),
            np.array([0.9, 0.5, 0.1]),
            1.0,
            1.0,
            np.array([0.0, 1.0, 0.0]),
            env,
        )
        np.testing.assert_allclose(value, [0.9, 0.5, 0.1], rtol=0.03)

    def test_homogenized_light_must_be_positive(self):
        with pytest.raises(ConfigError, match="positive"):
            HomogenizedLight(0.0)


class TestOracleRender:
    """픽셀 렌더"""

    def test_homogenized_render(self, sphere):
        frame = render_homogenized(sphere, _camera(), HomogenizedLight(2.0))
        assert frame.alpha[8, 8] == 1.0
        assert frame.alpha[0, 0] == 0.0
        hit = frame.alpha > 0.5
        np.testing.assert_allclose(frame.hdr[hit], 1.0)
        np.testing.assert_array_equal(frame.hdr[~hit], 0.0)
        np.testing.assert_array_equal(frame.shadow, 0.0)

    def test_reference_maps(self, sphere):
        env = make_environment(2, "sky", height=16)
        frame = render_reference(sphere, _camera(), env, env_height=8)
        maps = frame.maps()
        assert tuple(maps) == ORACLE_MAPS
        assert maps["hdr"].shape == (16, 16, 3)
        assert maps["normal"].shape == (16, 16, 3)
        for name in ("alpha", "basecolor", "roughness", "metallic", "shadow", "depth"):
            assert maps[name].shape[:2] == (16, 16)
        hit = frame.alpha > 0.5
        assert np.all(frame.depth[hit] > 0.0)
        np.testing.assert_allclose(frame.basecolor[hit], 0.5)
        np.testing.assert_array_equal(frame.hdr[~hit], 0.0)

    def test_convex_object_casts_no_self_shadow(self, sphere):
        """균일 조명 아래의 구: 그림자 없음, 모든 픽셀이 같은 radiance"""
        env = make_environment(0, "uniform", height=32)
        frame = render_reference(sphere, _camera(), env, env_height=16)
        hit = frame.alpha > 0.5
        np.testing.assert_array_equal(frame.shadow, 0.0)
        np.testing.assert_allclose(frame.hdr[hit], 0.5, rtol=0.05)

    def test_alpha_matches_between_renders(self, sphere):
        env = make_environment(0, "studio", height=16)
        camera = Camera.orbit(70.0, 20.0, 3.0, 40.0, 12, 12)
        reference = render_reference(sphere, camera, env, env_height=8)
        homogenized = render_homogenized(sphere, camera)
        np.testing.assert_array_equal(reference.alpha, homogenized.alpha)

    def test_homogenized_unit_light_is_albedo(self):
        material = Material(name="clay", albedo=(0.8, 0.3, 0.1), roughness=0.4, metallic=0.0)
        scene = single_primitive_scene(Primitive(kind="box", size=[0.3, 0.2, 0.3], materials=["clay"]), material, 256)
        frame = render_homogenized(scene, _camera())
        hit = frame.alpha > 0.5
        assert hit.any()
        np.testing.assert_allclose(frame.hdr[hit], np.broadcast_to([0.8, 0.3, 0.1], frame.hdr[hit].shape))

    def test_homogenized_specular_floor(self):
        """E0·albedo·(1 − m) + E0·F0, F0 = lerp(0.04·w, albedo, m)"""
        material = Material(name="brass", albedo=(0.6, 0.5, 0.2), roughness=0.3, metallic=0.5)
        scene = single_primitive_scene(Primitive(kind="sphere", size=[0.3], materials=["brass"]), material, 256)
        frame = render_homogenized(scene, _camera(), HomogenizedLight(2.0), specular_weight=1.0)
        hit = frame.alpha > 0.5
        expected = 2.0 * (np.array([0.6, 0.5, 0.2]) + 0.02)
        np.testing.assert_allclose(frame.hdr[hit], np.broadcast_to(expected, frame.hdr[hit].shape))

    def test_joint_rotation_keeps_the_image(self):
        """장면, 카메라, 환경맵을 같은 yaw 로 돌리면 같은 이미지"""
        scene = generate_scene(2, "composite", surfel_budget=512)
        env = make_environment(1, "studio", height=16)
        camera = Camera.orbit(30.0, 20.0, 2.0, 40.0, 24, 24)
        angle = 2.0 * math.pi * 4 / env.width
        R = yaw_rotation(angle)
        baseline = render_reference(scene, camera, env, env_height=8)
        rotated = render_reference(
            scene.rotated(R), camera.transformed(R), rotate_envmap_yaw(env, angle), env_height=8
        )
        assert ssim(tonemap_agx(rotated.hdr), tonemap_agx(baseline.hdr)).item() >= 0.98
