"""
Reverse-mode 자동 미분 tensor 엔진

모든 학습 가능한 컴포넌트(flow, tokenizer, decoder, rasterizer 의 projection)는
이 모듈의 Tensor/Tape 위에서 동작합니다.

- Tensor: numpy 배열 + requires_grad + grad accumulator
- Tape: 활성화된 동안 기록된 연산 목록. backward 는 기록의 정확한 역순으로 진행
- 연산은 활성 Tape 가 있고 입력 중 하나라도 requires_grad 일 때만 기록됩니다.
"""

import contextlib
import contextvars
import logging
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from near.config import settings
from near.core.errors import NonFiniteError, TensorError

logger = logging.getLogger(__name__)

_dtype_var: contextvars.ContextVar = contextvars.ContextVar("near_dtype", default=None)
_tape_var: contextvars.ContextVar = contextvars.ContextVar("near_tape", default=None)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def default_dtype() -> np.dtype:
    """현재 컨텍스트의 기본 float dtype"""
    dtype = _dtype_var.get()
    if dtype is None:
        return np.dtype(settings.precision)
    return dtype


@contextlib.contextmanager
def precision(name: str):
    """기본 정밀도를 일시적으로 변경 (예: gradient check 용 float64 빌드)"""
    if name not in ("float32", "float64"):
        raise TensorError(f"Unsupported precision '{name}'")
    token = _dtype_var.set(np.dtype(name))
    try:
        yield
    finally:
        _dtype_var.reset(token)


@contextlib.contextmanager
def no_grad():
    """이 블록 안에서는 어떤 연산도 tape 에 기록되지 않음"""
    token = _tape_var.set(None)
    try:
        yield
    finally:
        _tape_var.reset(token)


def active_tape() -> Optional["Tape"]:
    return _tape_var.get()


class Tensor:
    """Dense row-major tensor with an optional gradient accumulator."""

    __array_priority__ = 1000

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[Union[str, np.dtype]] = None,
    ):
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if requires_grad else None
        )
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    # ------------------------------------------------------------------
    # 기본 속성
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise TensorError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite:
            raise NonFiniteError(f"{what} contains NaN or Inf values")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"'{self.name}', " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.dtype}{flag})"

    # ------------------------------------------------------------------
    # 연산자 오버로딩
    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=default_dtype()), requires_grad=False)


class _Node:
    __slots__ = ("op", "output", "inputs", "backward_fn")

    def __init__(self, op: str, output: Tensor, inputs: Sequence[Tensor], backward_fn):
        self.op = op
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """
    순서가 있는 연산 기록

    Examples:
        >>> with Tape() as tape:
        ...     loss = (x * x).sum()
        >>> tape.backward(loss)
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _tape_var.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_var.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self, op: str, output: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn
    ) -> None:
        self.nodes.append(_Node(op, output, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """
        loss 로부터 기록의 역순으로 gradient 를 전파

        Args:
            loss: scalar tensor

        Raises:
            TensorError: loss 가 scalar 가 아니거나 기록된 그래프와 연결되지 않은 경우
        """
        if loss.size != 1:
            raise TensorError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TensorError("loss does not depend on any tensor that requires grad")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(node.output) for node in self.nodes}
        leaves: Dict[int, Tensor] = {}
        if id(loss) not in produced:
            leaves[id(loss)] = loss

        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            _accumulate(node.output, g)
            input_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = _unbroadcast(np.asarray(ig), inp.shape).astype(inp.dtype, copy=False)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    leaves[key] = inp

        for key, tensor in leaves.items():
            g = grads.pop(key, None)
            if g is not None:
                _accumulate(tensor, g)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` of every requires_grad tensor reachable from ``loss``."""
    tape.backward(loss)


def _accumulate(tensor: Tensor, g: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.array(g, dtype=tensor.dtype)
    else:
        tensor.grad = tensor.grad + g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _tape_var.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, out, inputs, backward_fn)
    return out


# ----------------------------------------------------------------------
# 원소별 이항 연산 (broadcasting 지원)
# ----------------------------------------------------------------------
def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        "div", out, (a, b), lambda g: (g / b.data, -g * out / b.data)
    )


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(
        "pow",
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


# ----------------------------------------------------------------------
# 원소별 단항 연산
# ----------------------------------------------------------------------
def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sin(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(-np.logaddexp(0.0, -a.data)).astype(a.dtype, copy=False)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def elu(a: TensorLike) -> Tensor:
    """ELU with alpha = 1"""
    a = as_tensor(a)
    positive = a.data > 0
    expm = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(positive, a.data, expm).astype(a.dtype)
    return _make("elu", out, (a,), lambda g: (g * np.where(positive, 1.0, expm + 1.0),))


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    slope = np.exp(-np.logaddexp(0.0, -a.data))
    return _make("softplus", out, (a,), lambda g: (g * slope,))


def clip(a: TensorLike, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------------
# Reduction
# ----------------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make(
        "sum", out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),)
    )


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1) if a.size else 1
    return _make(
        "mean",
        out,
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,),
    )


# ----------------------------------------------------------------------
# Shape 연산
# ----------------------------------------------------------------------
def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(
        "transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return not any(isinstance(it, (np.ndarray, list)) for it in items)


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    def backward_fn(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        if _is_basic_index(index):
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.asarray(a.data[index]), (a,), backward_fn)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise TensorError("concat requires at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise TensorError("stack requires at least one tensor")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return _make(
        "stack",
        out,
        tensors,
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))),
    )


# ----------------------------------------------------------------------
# 선형 대수
# ----------------------------------------------------------------------
def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError(f"matmul expects >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(
        "matmul",
        np.matmul(a.data, b.data),
        (a, b),
        lambda g: (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        ),
    )


def linear(x: TensorLike, W: TensorLike, b: Optional[TensorLike] = None) -> Tensor:
    """
    y = xW + b

    Args:
        x: (..., d_in)
        W: (d_in, d_out)
        b: (d_out,) 또는 None

    Raises:
        TensorError: shape 불일치
    """
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise TensorError(f"linear shape mismatch: x {x.shape}, W {W.shape}")
    out = x.data @ W.data
    if b is None:
        return _make(
            "linear",
            out,
            (x, W),
            lambda g: (
                g @ W.data.T,
                x.data.reshape(-1, W.shape[0]).T @ g.reshape(-1, W.shape[1]),
            ),
        )
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise TensorError(f"linear bias shape {b.shape} does not match W {W.shape}")
    return _make(
        "linear",
        out + b.data,
        (x, W, b),
        lambda g: (
            g @ W.data.T,
            x.data.reshape(-1, W.shape[0]).T @ g.reshape(-1, W.shape[1]),
            g.reshape(-1, W.shape[1]).sum(axis=0),
        ),
    )


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(
        "softmax",
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def where(condition: np.ndarray, a: TensorLike, b: TensorLike) -> Tensor:
    """condition 은 상수 boolean 배열"""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)
    return _make(
        "where",
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
    )


def cast(a: TensorLike, dtype) -> Tensor:
    """dtype 변환 (gradient 는 원래 dtype 으로 되돌아감)"""
    a = as_tensor(a)
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    return _make("cast", a.data.astype(dtype), (a,), lambda g: (g,))


def custom_op(
    op: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: BackwardFn,
) -> Tensor:
    """analytic backward 를 직접 제공하는 연산을 tape 에 기록"""
    return _make(op, data, [as_tensor(t) for t in inputs], backward_fn)
