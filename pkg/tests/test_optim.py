"""
Tests for AdamW and the learning-rate schedule
"""

import numpy as np
import pytest

from near.core.errors import TensorError
from near.core.nn import Parameter
from near.core.optim import AdamW, AdamWState, adamw_step, warmup_cosine_lr
from near.core.tensor import precision


class TestAdamW:
    """AdamW 업데이트"""

    def test_first_step_on_scalar(self):
        """g=1, lr=0.1 이면 첫 step 은 θ - 0.1/(1+ε)"""
        with precision("float64"):
            theta = Parameter(np.array([2.0]))
        theta.grad = np.array([1.0])
        AdamW({"theta": theta}, lr=0.1).step()
        np.testing.assert_allclose(theta.data, [2.0 - 0.1 / (1.0 + 1e-8)], rtol=0, atol=1e-15)

    def test_weight_decay_is_decoupled(self):
        """gradient 0 이면 weight decay 만 적용"""
        with precision("float64"):
            theta = Parameter(np.array([1.0]))
        theta.grad = np.zeros(1)
        AdamW({"theta": theta}, lr=0.1, weight_decay=0.5).step()
        np.testing.assert_allclose(theta.data, [0.95])

    def test_step_counter_and_override_lr(self):
        with precision("float64"):
            theta = Parameter(np.array([0.0]))
        opt = AdamW({"theta": theta}, lr=1.0)
        theta.grad = np.array([-1.0])
        opt.step(lr=0.01)
        np.testing.assert_allclose(theta.data, [0.01], atol=1e-9)
        assert opt.state.step == 1

    def test_shape_mismatch(self):
        theta = Parameter(np.zeros(3))
        with pytest.raises(TensorError, match="shape mismatch"):
            adamw_step([theta], [np.zeros(2)], AdamWState())

    def test_state_dict_resume(self):
        """저장한 moment 로 재개하면 같은 궤적"""
        with precision("float64"):
            a = Parameter(np.array([1.0, -1.0]))
            b = Parameter(np.array([1.0, -1.0]))
        opt_a = AdamW({"w": a}, lr=0.05)
        for g in ([0.3, -0.2], [0.1, 0.4]):
            a.grad = np.array(g)
            opt_a.step()
        b.data[...] = a.data
        opt_b = AdamW({"w": b}, lr=0.05)
        opt_b.load_state_dict(opt_a.state_dict())
        assert opt_b.state.step == 2
        a.grad = np.array([0.2, 0.2])
        b.grad = np.array([0.2, 0.2])
        opt_a.step()
        opt_b.step()
        np.testing.assert_allclose(a.data, b.data)

    def test_minimizes_quadratic(self):
        with precision("float64"):
            w = Parameter(np.array([3.0, -2.0]))
        opt = AdamW({"w": w}, lr=0.1)
        for _ in range(300):
            w.grad = 2.0 * w.data
            opt.step()
        assert np.abs(w.data).max() < 0.3


class TestSchedule:
    """warm-up + cosine"""

    def test_warmup_is_linear(self):
        assert warmup_cosine_lr(0, 1.0, 100, warmup_steps=10) == pytest.approx(0.1)
        assert warmup_cosine_lr(9, 1.0, 100, warmup_steps=10) == pytest.approx(1.0)

    def test_cosine_reaches_min(self):
        assert warmup_cosine_lr(10, 1.0, 110, warmup_steps=10) == pytest.approx(1.0)
        assert warmup_cosine_lr(110, 1.0, 110, warmup_steps=10, min_lr=0.1) == pytest.approx(0.1)
        assert warmup_cosine_lr(60, 1.0, 110, warmup_steps=10) == pytest.approx(0.5)
