"""
Tests for rectified-flow training targets, the Euler sampler and homogenization
"""

import numpy as np
import pytest

from near.core.errors import NonFiniteError, SlatError, TensorError, TrainingError
from near.core.gradcheck import grad_check
from near.core.optim import AdamW
from near.core.tensor import Tape, Tensor
from near.latent.slat import Slat
from near.models.flow import (
    cfm_loss,
    flow_batch,
    homogenize,
    interpolate,
    make_two_moons,
    sample,
    sample_noise,
)
from near.models.velocity import ConstantVelocity, FlowConditions, ToyVelocityMLP, VelocityNet
from near.services.flow import toy_moments, train_toy_flow


def _slat(rng, d=4):
    coords = np.array([[x, y, z] for x in range(2) for y in range(2) for z in range(2)])
    return Slat(4, coords, rng.normal(size=(8, d)).astype(np.float32))


def _net(rng, d=4):
    return VelocityNet(rng, feature_dim=d, cond_dim=3, dim=8, num_heads=2, blocks=2, window_size=2)


class TestTargets:
    """보간과 CFM loss"""

    def test_interpolate_midpoint(self):
        np.testing.assert_allclose(interpolate(np.zeros(3), np.full(3, 2.0), 0.5), 1.0)

    def test_interpolate_endpoints(self, rng):
        z0, eps = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(interpolate(z0, eps, 0.0), z0)
        np.testing.assert_allclose(interpolate(z0, eps, 1.0), eps)

    def test_interpolate_per_row_time(self):
        out = interpolate(np.zeros((2, 2)), np.ones((2, 2)), np.array([0.25, 0.75]))
        np.testing.assert_allclose(out, [[0.25, 0.25], [0.75, 0.75]])

    def test_time_out_of_range(self):
        with pytest.raises(TensorError, match=r"\[0, 1\]"):
            interpolate(np.zeros(2), np.zeros(2), 1.5)

    def test_interpolate_shape_mismatch(self):
        with pytest.raises(TensorError):
            interpolate(np.zeros(2), np.zeros(3), 0.5)

    def test_cfm_loss_value(self, float64):
        """v = 0, ε − z0 = 1 이면 loss 1"""
        loss = cfm_loss(np.zeros((3, 2)), np.zeros((3, 2)), np.ones((3, 2)))
        assert loss.item() == pytest.approx(1.0)

    def test_cfm_loss_gradient(self, float64, rng):
        v = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        z0, eps = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        assert grad_check(lambda: cfm_loss(v, z0, eps), [v]) < 1e-6

    def test_flow_batch_is_consistent(self, rng):
        z0 = rng.normal(size=(5, 3))
        eps, z_t, t = flow_batch(z0, rng)
        assert 0.0 <= t <= 1.0
        np.testing.assert_allclose(z_t, (1.0 - t) * z0 + t * eps)


class TestSampler:
    """Euler 적분"""

    def test_constant_field_recovers_data(self, rng):
        z0, eps = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        for steps in (1, 4, 25):
            out = sample(ConstantVelocity(eps - z0), None, z0.shape, steps=steps, noise=eps)
            np.testing.assert_allclose(out, z0, atol=1e-12)

    def test_single_step(self, rng):
        eps = rng.normal(size=(2, 2))
        v = rng.normal(size=(2, 2))
        np.testing.assert_allclose(sample(ConstantVelocity(v), None, (2, 2), steps=1, noise=eps), eps - v)

    def test_seeded_noise(self):
        np.testing.assert_array_equal(sample_noise((3, 2), 5), sample_noise((3, 2), 5))

    def test_needs_a_step(self):
        with pytest.raises(TensorError, match="at least one step"):
            sample(ConstantVelocity(np.zeros(2)), None, (2,), steps=0)

    def test_noise_shape(self):
        with pytest.raises(TensorError, match="noise shape"):
            sample(ConstantVelocity(np.zeros(2)), None, (2,), noise=np.zeros(3))

    def test_divergence_is_reported(self):
        with pytest.raises(NonFiniteError, match="non-finite"):
            sample(ConstantVelocity(np.full(2, np.inf)), None, (2,), steps=2)


class TestVelocityNet:
    """조건부 velocity 네트워크"""

    def test_output_shape(self, rng):
        net = _net(rng)
        slat = _slat(rng)
        cond = FlowConditions(slat.feats, np.ones(3), slat.coords, 4)
        assert net(slat.feats, 0.3, cond).shape == (8, 4)

    def test_condition_rows_must_match(self, rng):
        with pytest.raises(SlatError):
            FlowConditions(np.zeros((3, 4)), np.ones(3), np.zeros((2, 3)), 4)

    def test_image_condition_dim(self, rng):
        net = _net(rng)
        slat = _slat(rng)
        with pytest.raises(TensorError, match="image condition"):
            net(slat.feats, 0.3, FlowConditions(slat.feats, np.ones(5), slat.coords, 4))

    def test_gradient_check(self, float64, rng):
        net = _net(rng)
        slat = _slat(rng)
        z = Tensor(slat.feats.astype(np.float64), requires_grad=True)
        cond = FlowConditions(slat.feats, np.ones(3), slat.coords, 4)
        params = [z, net.in_proj.weight, net.out_proj.weight]
        assert grad_check(lambda: net(z, 0.7, cond), params, max_coords=8) < 1e-5


class TestHomogenize:
    """Z_s → Ẑ_lh"""

    def test_requires_trained_adapter(self, rng):
        net = _net(rng)
        slat = _slat(rng)
        with pytest.raises(TrainingError, match="LoRA"):
            homogenize(net, slat, np.ones(3), steps=2)
        net.attach_adapters(2, 4.0, rng)
        with pytest.raises(TrainingError):
            homogenize(net, slat, np.ones(3), steps=2)

    def test_keeps_coordinates(self, rng):
        net = _net(rng)
        net.attach_adapters(2, 4.0, rng)
        net.adapter_steps = 1
        slat = Slat(4, _slat(rng).coords, rng.normal(size=(8, 4)), rng.normal(size=(8, 2)))
        out = homogenize(net, slat, np.ones(3), steps=2, seed=3)
        assert out.same_coords(slat)
        np.testing.assert_array_equal(out.basecolor_feats, slat.basecolor_feats)
        again = homogenize(net, slat, np.ones(3), steps=2, seed=3)
        assert out == again

    def test_feature_dim_mismatch(self, rng):
        net = _net(rng, d=4)
        net.attach_adapters(2, 4.0, rng)
        net.adapter_steps = 1
        with pytest.raises(SlatError, match="flow expects"):
            homogenize(net, _slat(rng, d=3), np.ones(3))


class TestToyFlow:
    """2D two-moons"""

    def test_two_moons(self):
        points = make_two_moons(200, seed=1)
        assert points.shape == (200, 2)
        assert -1.5 < points[:, 0].min() and points[:, 0].max() < 2.5

    def test_toy_velocity_accepts_per_row_time(self, rng):
        net = ToyVelocityMLP(rng, hidden=8, layers=1)
        assert net(np.zeros((3, 2)), np.array([0.1, 0.5, 0.9])).shape == (3, 2)

    def test_toy_training_runs(self):
        net, data = train_toy_flow(iterations=5, samples=32, batch=16, seed=0)
        mean, cov = toy_moments(net, 16, steps=2, seed=1)
        assert data.shape == (32, 2)
        assert mean.shape == (2,) and cov.shape == (2, 2)

    @pytest.mark.slow
    def test_toy_flow_matches_moments(self):
        """학습된 flow 의 sample 평균/공분산이 데이터와 가까움"""
        net, data = train_toy_flow(iterations=2000, samples=2048, seed=0)
        mean, cov = toy_moments(net, 2048, steps=25, seed=1)
        np.testing.assert_allclose(mean, data.mean(axis=0), atol=0.15)
        np.testing.assert_allclose(cov, np.cov(data, rowvar=False), atol=0.15)

    def test_loss_decreases(self):
        net = ToyVelocityMLP(np.random.default_rng(0), hidden=16, layers=2)
        data = make_two_moons(64, seed=0)
        optimizer = AdamW(net.trainable_parameters(), lr=5e-3)
        fixed = np.random.default_rng(9)
        eps, z_t, t = flow_batch(data, fixed, per_row_time=True)

        def step():
            optimizer.zero_grad()
            with Tape() as tape:
                loss = cfm_loss(net(z_t, t), data, eps)
            tape.backward(loss)
            optimizer.step()
            return loss.item()

        first = step()
        for _ in range(50):
            last = step()
        assert last < first
