"""
Tests for low-rank adapters
"""

import numpy as np
import pytest

from near.core.errors import TensorError
from near.core.gradcheck import grad_check
from near.core.nn import Linear, Module, MultiHeadAttention
from near.core.tensor import Tape, Tensor, tsum
from near.models.lora import LoraAdapter, LoraLinear, attach_lora, freeze_base, lora_forward, lora_parameters


class Block(Module):
    def __init__(self, rng):
        self.attn = MultiHeadAttention(4, 2, rng)
        self.head = Linear(4, 2, rng)


class TestLoraAdapter:
    """rsLoRA projection"""

    def test_scale(self, rng):
        assert LoraAdapter(4, 3, rank=4, alpha=8.0, rng=rng).scale == pytest.approx(4.0)

    def test_zero_up_matches_base(self, float64, rng):
        base = Linear(4, 3, rng)
        x = rng.normal(size=(5, 4))
        wrapped = LoraLinear(base, rank=2, alpha=4.0, rng=rng)
        np.testing.assert_array_equal(wrapped(x).numpy(), base(x).numpy())

    def test_merged_weight(self, float64, rng):
        base = Linear(4, 3, rng)
        wrapped = LoraLinear(base, rank=2, alpha=4.0, rng=rng)
        wrapped.adapter.up.data[...] = rng.normal(size=(2, 3))
        x = rng.normal(size=(5, 4))
        expected = x @ wrapped.merged_weight() + base.bias.data
        np.testing.assert_allclose(wrapped(x).numpy(), expected)

    def test_rank_must_be_positive(self, rng):
        with pytest.raises(TensorError, match="rank"):
            LoraAdapter(4, 3, rank=0, alpha=1.0, rng=rng)

    def test_factor_shape_mismatch(self, rng):
        adapter = LoraAdapter(4, 3, rank=2, alpha=1.0, rng=rng)
        with pytest.raises(TensorError, match="do not match"):
            lora_forward(np.zeros((1, 5)), np.zeros((5, 3)), adapter)

    def test_gradient_check(self, float64, rng):
        base = Linear(4, 3, rng)
        wrapped = LoraLinear(base, rank=2, alpha=4.0, rng=rng)
        wrapped.adapter.up.data[...] = rng.normal(size=(2, 3))
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        params = [x, wrapped.adapter.down, wrapped.adapter.up]
        assert grad_check(lambda: wrapped(x), params) < 1e-6


class TestAttachLora:
    """모듈 트리에 adapter 부착"""

    def test_replaces_attention_projections(self, rng):
        block = Block(rng)
        names = attach_lora(block, rank=2, alpha=4.0, rng=rng)
        assert names == ["attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj"]
        assert isinstance(block.attn.q_proj, LoraLinear)
        assert isinstance(block.head, Linear) and not isinstance(block.head, LoraLinear)

    def test_base_names_are_unchanged(self, rng):
        block = Block(rng)
        before = set(block.state_dict())
        attach_lora(block, rank=2, alpha=4.0, rng=rng)
        after = set(block.state_dict())
        assert before <= after
        assert after - before == set(lora_parameters(block))
        assert "attn.q_proj.adapter.down" in after

    def test_attach_keeps_output(self, float64, rng):
        block = Block(rng)
        x = rng.normal(size=(3, 4))
        before = block.attn(x).numpy()
        attach_lora(block, rank=2, alpha=4.0, rng=rng)
        np.testing.assert_array_equal(block.attn(x).numpy(), before)

    def test_freeze_base_trains_only_adapters(self, float64, rng):
        block = Block(rng)
        attach_lora(block, rank=2, alpha=4.0, rng=rng)
        freeze_base(block)
        assert set(block.trainable_parameters()) == set(lora_parameters(block))
        with Tape() as tape:
            loss = tsum(block.attn(rng.normal(size=(3, 4))))
        tape.backward(loss)
        assert block.attn.q_proj.weight.grad is None
        assert block.attn.o_proj.adapter.up.grad is not None
