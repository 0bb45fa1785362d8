"""
학습 가능한 레이어

Module 은 attribute 선언 순서대로 파라미터 이름을 만듭니다
("blocks.0.attn.q_proj.weight" 형태). 이 이름이 체크포인트 레코드 이름이
되고 LoRA 가 대상 projection 을 찾을 때 사용됩니다.
"""

import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from near.core import functional as F
from near.core.errors import TensorError
from near.core.tensor import (
    Tensor,
    TensorLike,
    as_tensor,
    concat,
    getitem,
    linear,
    relu,
    reshape,
    transpose,
)

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """파라미터와 하위 Module 을 보유하는 기반 클래스"""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, value in self.__dict__.items():
            if isinstance(value, Module):
                yield key, value

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self.named_children():
            child_prefix = f"{prefix}.{key}" if prefix else key
            yield from child.named_modules(child_prefix)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self.__dict__.items():
            full = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> Dict[str, Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
            p.grad = np.zeros_like(p.data)
        return self

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(
        self, state: Dict[str, np.ndarray], prefix: str = "", strict: bool = True
    ) -> None:
        """
        이름이 일치하는 파라미터에 값을 복사

        Raises:
            TensorError: strict 모드에서 누락/불일치 키가 있거나 shape 이 다른 경우
        """
        own = dict(self.named_parameters(prefix))
        missing = [name for name in own if name not in state]
        if strict and missing:
            raise TensorError(f"Missing parameters in state: {missing[:5]}")
        for name, param in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise TensorError(
                    f"Shape mismatch for '{name}': {value.shape} vs {param.shape}"
                )
            param.data[...] = value.astype(param.dtype, copy=False)


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        for i, module in enumerate(modules):
            setattr(self, str(i), module)
        self._length = len(modules)

    def __len__(self) -> int:
        return self._length

    def __getitem__(self, index: int) -> Module:
        if index < 0:
            index += self._length
        return getattr(self, str(index))

    def __iter__(self) -> Iterator[Module]:
        for i in range(self._length):
            yield getattr(self, str(i))


def uniform_fan_in(
    rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]
) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = xW + b, W 는 (in_features, out_features) 로 저장"""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        zero_init: bool = False,
    ):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            self.weight = Parameter(np.zeros((in_features, out_features)))
        else:
            self.weight = Parameter(
                uniform_fan_in(rng, in_features, (in_features, out_features))
            )
        self.bias = None
        if bias:
            if zero_init:
                self.bias = Parameter(np.zeros(out_features))
            else:
                self.bias = Parameter(uniform_fan_in(rng, in_features, (out_features,)))

    def forward(self, x: TensorLike) -> Tensor:
        return linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.num_embeddings = num_embeddings
        self.weight = Parameter(rng.normal(0.0, 0.02, size=(num_embeddings, dim)))

    def forward(self, indices: np.ndarray) -> Tensor:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.num_embeddings):
            raise TensorError(
                f"Embedding index out of range [0, {self.num_embeddings})"
            )
        return getitem(self.weight, indices)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.scale = Parameter(np.ones(dim))

    def forward(self, x: TensorLike) -> Tensor:
        return F.rms_norm(x, self.scale, self.eps)


class MLP(Module):
    """Linear 레이어 스택, 중간 활성화는 relu. 마지막 레이어는 활성화 없음"""

    def __init__(
        self,
        dims: Sequence[int],
        rng: np.random.Generator,
        zero_init_last: bool = False,
    ):
        if len(dims) < 2:
            raise TensorError("MLP needs at least input and output dims")
        layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            layers.append(
                Linear(dims[i], dims[i + 1], rng, zero_init=last and zero_init_last)
            )
        self.layers = ModuleList(layers)

    def forward(self, x: TensorLike) -> Tensor:
        h = as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = relu(h)
        return h


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(dim, hidden, rng)
        self.down = Linear(hidden, dim, rng)

    def forward(self, x: TensorLike) -> Tensor:
        return self.down(relu(self.up(x)))


class MultiHeadAttention(Module):
    """
    q/k/v/o projection 을 갖는 multi-head attention

    Args:
        dim: 입력/출력 차원
        num_heads: head 개수 (dim 을 나누어야 함)
        kv_dim: key/value 입력 차원 (cross-attention), 기본값 dim
        zero_init_output: o_proj 를 0 으로 초기화 (residual 이 항등으로 시작)
    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        rng: np.random.Generator,
        kv_dim: Optional[int] = None,
        zero_init_output: bool = False,
    ):
        if dim % num_heads:
            raise TensorError(f"dim {dim} is not divisible by num_heads {num_heads}")
        kv_dim = kv_dim or dim
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(kv_dim, dim, rng)
        self.v_proj = Linear(kv_dim, dim, rng)
        self.o_proj = Linear(dim, dim, rng, zero_init=zero_init_output)

    def _heads_axes(self, lead: int) -> Tuple[int, ...]:
        return tuple(range(lead)) + (lead + 1, lead, lead + 2)

    def _split(self, x: Tensor) -> Tensor:
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = reshape(x, lead + (n, self.num_heads, self.head_dim))
        return transpose(x, self._heads_axes(len(lead)))

    def forward(
        self,
        x: TensorLike,
        context: Optional[TensorLike] = None,
        positions: Optional[np.ndarray] = None,
    ) -> Tensor:
        """
        Args:
            x: (..., n, dim) query 토큰
            context: (..., m, kv_dim) key/value 토큰, None 이면 self-attention
            positions: RoPE 위치 (self-attention 에서만 사용)
        """
        x = as_tensor(x)
        context = x if context is None else as_tensor(context)
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        if positions is not None:
            q = F.rotary_embedding(q, positions)
            k = F.rotary_embedding(k, positions)
        out = F.attention(q, k, v)
        lead = x.shape[:-2]
        out = transpose(out, self._heads_axes(len(lead)))
        return self.o_proj(reshape(out, lead + (x.shape[-2], self.dim)))


def windowed_apply(fn, x: Tensor, groups: Sequence[np.ndarray]) -> Tensor:
    """
    각 그룹(토큰 인덱스 배열)에 fn 을 적용하고 원래 토큰 순서로 되돌림

    groups 는 {0..K-1} 의 분할이어야 합니다.
    """
    if len(groups) == 1 and len(groups[0]) == x.shape[0]:
        order = np.asarray(groups[0])
        if np.array_equal(order, np.arange(x.shape[0])):
            return fn(x)
    outputs = [fn(getitem(x, np.asarray(g))) for g in groups]
    order = np.concatenate([np.asarray(g) for g in groups])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return getitem(concat(outputs, axis=0), inverse)
