import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from near.core.errors import TensorError
from near.core.nn import Parameter
from near.core.tensor import Tensor

logger = logging.getLogger(__name__)


class AdamWState:
    """
    AdamW 옵티마이저 상태

    Attributes:
        lr: 학습률
        beta1, beta2, eps: moment 하이퍼파라미터
        weight_decay: decoupled weight decay 계수
        step: 지금까지 수행한 업데이트 횟수 (엄격하게 증가)
        m, v: 파라미터별 1차/2차 moment (파라미터와 같은 shape)
    """

    def __init__(
        self,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step = 0
        self.m: List[Optional[np.ndarray]] = []
        self.v: List[Optional[np.ndarray]] = []


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    lr: Optional[float] = None,
) -> None:
    """
    AdamW 업데이트를 in-place 로 적용

    Args:
        params: 업데이트할 파라미터
        grads: 파라미터와 같은 순서/shape 의 gradient
        state: moment 와 step 카운터 (in-place 로 갱신)
        lr: 이번 step 에만 적용할 학습률 (스케줄러용), None 이면 state.lr

    Raises:
        TensorError: 개수나 shape 가 맞지 않는 경우
    """
    if len(params) != len(grads):
        raise TensorError(f"adamw_step got {len(params)} params and {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise TensorError("AdamW state does not match the parameter list")

    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t

    for i, (param, grad) in enumerate(zip(params, grads)):
        grad = np.asarray(grad)
        if grad.shape != param.shape or state.m[i].shape != param.shape:
            raise TensorError(
                f"adamw_step shape mismatch: param {param.shape}, grad {grad.shape}"
            )
        if state.weight_decay:
            param.data -= lr * state.weight_decay * param.data
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            param.dtype, copy=False
        )


class AdamW:
    """이름 있는 파라미터 집합에 대한 AdamW (체크포인트 저장/복원 지원)"""

    def __init__(
        self,
        named_params: Dict[str, Parameter],
        lr: float = 1e-4,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.names = list(named_params.keys())
        self.params = [named_params[n] for n in self.names]
        self.state = AdamWState(lr, betas[0], betas[1], eps, weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params
        ]
        adamw_step(self.params, grads, self.state, lr=lr)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {
            "optim/step": np.array(self.state.step, dtype=np.float64)
        }
        for i, name in enumerate(self.names):
            if self.state.m:
                out[f"optim/m/{name}"] = self.state.m[i]
                out[f"optim/v/{name}"] = self.state.v[i]
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if "optim/step" not in state:
            logger.warning("Checkpoint has no optimizer state, starting fresh moments")
            return
        self.state.step = int(np.asarray(state["optim/step"]).reshape(-1)[0])
        if not self.names or f"optim/m/{self.names[0]}" not in state:
            return
        self.state.m = []
        self.state.v = []
        for name, param in zip(self.names, self.params):
            self.state.m.append(
                np.asarray(state[f"optim/m/{name}"], dtype=param.dtype).reshape(param.shape)
            )
            self.state.v.append(
                np.asarray(state[f"optim/v/{name}"], dtype=param.dtype).reshape(param.shape)
            )


def warmup_cosine_lr(
    step: int,
    base_lr: float,
    total_steps: int,
    warmup_steps: int = 0,
    min_lr: float = 0.0,
) -> float:
    """선형 warm-up 후 cosine decay (step 은 0부터)"""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
