"""
Low-rank adaptation (rsLoRA)

    y = xW + b + (α/√r)·(xA)B

B 는 0 으로 초기화되어 부착 직후의 출력은 base projection 과 정확히 같습니다.
"""

import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from near.core.errors import TensorError
from near.core.nn import Linear, Module, Parameter, uniform_fan_in
from near.core.tensor import Tensor, TensorLike, as_tensor, linear

logger = logging.getLogger(__name__)

DEFAULT_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj")


class LoraAdapter(Module):
    """
    Args:
        in_features, out_features: base projection 크기
        rank: r ≥ 1
        alpha: scale = α/√r
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rank: int,
        alpha: float,
        rng: np.random.Generator,
    ):
        if rank < 1:
            raise TensorError(f"LoRA rank must be >= 1, got {rank}")
        self.rank = rank
        self.alpha = float(alpha)
        self.scale = self.alpha / math.sqrt(rank)
        self.down = Parameter(uniform_fan_in(rng, in_features, (in_features, rank)))
        self.up = Parameter(np.zeros((rank, out_features)))

    def forward(self, x: TensorLike) -> Tensor:
        return linear(linear(x, self.down), self.up) * self.scale


def lora_forward(
    x: TensorLike, weight: TensorLike, adapter: LoraAdapter, bias: Optional[TensorLike] = None
) -> Tensor:
    """
    xW + b + scale·(xA)B

    Raises:
        TensorError: adapter rank 나 크기가 base weight 와 맞지 않는 경우
    """
    weight = as_tensor(weight)
    if adapter.down.shape[1] != adapter.rank or adapter.up.shape[0] != adapter.rank:
        raise TensorError("LoRA factors disagree with the adapter rank")
    if adapter.down.shape[0] != weight.shape[0] or adapter.up.shape[1] != weight.shape[1]:
        raise TensorError(
            f"LoRA factors {adapter.down.shape}x{adapter.up.shape} do not match weight {weight.shape}"
        )
    return linear(x, weight, bias) + adapter(x)


class LoraLinear(Module):
    """
    base Linear 를 감싼 projection. weight/bias 는 base 와 같은 Parameter 객체이므로
    파라미터 이름("...q_proj.weight")이 base 체크포인트와 호환됩니다.
    """

    def __init__(self, base: Linear, rank: int, alpha: float, rng: np.random.Generator):
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.weight = base.weight
        self.bias = base.bias
        self.adapter = LoraAdapter(base.in_features, base.out_features, rank, alpha, rng)

    def forward(self, x: TensorLike) -> Tensor:
        return lora_forward(x, self.weight, self.adapter, self.bias)

    def merged_weight(self) -> np.ndarray:
        return self.weight.data + self.adapter.scale * (self.adapter.down.data @ self.adapter.up.data)


def attach_lora(
    module: Module,
    rank: int,
    alpha: float,
    rng: np.random.Generator,
    targets: Sequence[str] = DEFAULT_TARGETS,
) -> List[str]:
    """
    이름이 targets 중 하나인 Linear 하위 모듈을 LoraLinear 로 교체

    Returns:
        교체된 모듈의 전체 이름 목록 (순회 순서)
    """
    replaced = []
    for name, parent in list(module.named_modules()):
        for key, child in list(parent.named_children()):
            if key in targets and isinstance(child, Linear):
                setattr(parent, key, LoraLinear(child, rank, alpha, rng))
                replaced.append(f"{name}.{key}" if name else key)
    logger.info(f"Attached rank-{rank} LoRA adapters to {len(replaced)} projections")
    return replaced


def lora_parameters(module: Module) -> Dict[str, Parameter]:
    return {n: p for n, p in module.named_parameters() if ".adapter." in f".{n}"}


def freeze_base(module: Module) -> None:
    """adapter 를 제외한 모든 파라미터를 고정"""
    adapters = set(id(p) for p in lora_parameters(module).values())
    for p in module.parameters():
        if id(p) in adapters:
            p.requires_grad = True
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        else:
            p.requires_grad = False
            p.grad = None
