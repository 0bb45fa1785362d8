"""
Tests for modules, parameter bookkeeping and windowed attention
"""

import numpy as np
import pytest

from near.core.errors import TensorError
from near.core.gradcheck import grad_check
from near.core.nn import (
    MLP,
    Embedding,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    RMSNorm,
    windowed_apply,
)
from near.core.tensor import Tensor, as_tensor


class Tiny(Module):
    def __init__(self, rng):
        self.first = Linear(3, 4, rng)
        self.stack = ModuleList([Linear(4, 4, rng), RMSNorm(4)])


class TestModule:
    """파라미터 이름과 state dict"""

    def test_named_parameters_are_dotted(self, rng):
        names = [name for name, _ in Tiny(rng).named_parameters()]
        assert names == [
            "first.weight",
            "first.bias",
            "stack.0.weight",
            "stack.0.bias",
            "stack.1.scale",
        ]

    def test_state_dict_round_trip(self, rng):
        """같은 구조의 다른 초기화에 state 를 옮기면 값이 같아짐"""
        a, b = Tiny(rng), Tiny(np.random.default_rng(99))
        b.load_state_dict(a.state_dict())
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)

    def test_strict_load_reports_missing(self, rng):
        state = Tiny(rng).state_dict()
        state.pop("first.bias")
        with pytest.raises(TensorError, match="Missing"):
            Tiny(rng).load_state_dict(state)
        Tiny(rng).load_state_dict(state, strict=False)

    def test_load_shape_mismatch(self, rng):
        state = Tiny(rng).state_dict()
        state["first.weight"] = np.zeros((2, 2))
        with pytest.raises(TensorError, match="Shape mismatch"):
            Tiny(rng).load_state_dict(state)

    def test_freeze_hides_parameters(self, rng):
        model = Tiny(rng)
        model.first.freeze()
        assert set(model.trainable_parameters()) == {"stack.0.weight", "stack.0.bias", "stack.1.scale"}
        model.first.unfreeze()
        assert len(model.trainable_parameters()) == 5


class TestLayers:
    """Linear, Embedding, MLP"""

    def test_linear_zero_init(self, rng):
        layer = Linear(3, 2, rng, zero_init=True)
        np.testing.assert_array_equal(layer(np.ones((5, 3))).numpy(), np.zeros((5, 2)))

    def test_embedding_out_of_range(self, rng):
        with pytest.raises(TensorError, match="out of range"):
            Embedding(4, 2, rng)(np.array([4]))

    def test_mlp_needs_two_dims(self, rng):
        with pytest.raises(TensorError):
            MLP([3], rng)

    def test_mlp_gradient(self, float64, rng):
        mlp = MLP([3, 5, 2], rng)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        assert grad_check(lambda: mlp(x), [x] + mlp.parameters()) < 1e-6


class TestAttention:
    """multi-head attention 과 window 분할 적용"""

    def test_heads_must_divide_dim(self, rng):
        with pytest.raises(TensorError, match="divisible"):
            MultiHeadAttention(6, 4, rng)

    def test_zero_output_projection(self, rng):
        attn = MultiHeadAttention(4, 2, rng, zero_init_output=True)
        out = attn(rng.normal(size=(3, 4))).numpy()
        np.testing.assert_array_equal(out, np.zeros((3, 4)))

    def test_cross_attention_shape(self, rng):
        attn = MultiHeadAttention(4, 2, rng, kv_dim=6)
        out = attn(rng.normal(size=(3, 4)), context=rng.normal(size=(7, 6)))
        assert out.shape == (3, 4)

    def test_attention_gradient(self, float64, rng):
        attn = MultiHeadAttention(4, 2, rng)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        params = [x] + attn.parameters()
        assert grad_check(lambda: attn(x, positions=np.arange(3)), params) < 1e-6

    def test_windowed_apply_restores_order(self, float64, rng):
        """그룹별 결과가 원래 토큰 위치로 돌아감"""
        x = as_tensor(rng.normal(size=(5, 2)))
        groups = [np.array([3, 0]), np.array([4, 1, 2])]
        out = windowed_apply(lambda t: t * 2.0, x, groups).numpy()
        np.testing.assert_allclose(out, 2.0 * x.numpy())

    def test_windowed_attention_is_local(self, float64, rng):
        """다른 window 의 토큰을 바꿔도 출력이 변하지 않음"""
        attn = MultiHeadAttention(4, 2, rng)
        data = rng.normal(size=(4, 4))
        groups = [np.array([0, 1]), np.array([2, 3])]
        before = windowed_apply(attn, as_tensor(data), groups).numpy()
        data[3] += 10.0
        after = windowed_apply(attn, as_tensor(data), groups).numpy()
        np.testing.assert_allclose(before[:2], after[:2])
        assert not np.allclose(before[2:], after[2:])
