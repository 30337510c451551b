"""
AdamW with decoupled weight decay.

Frozen tensors, by flag or by the frozen-base role, are rejected both when an
optimizer is built over them and on every individual step, so a frozen
base model can never drift.
"""

import logging
from typing import Iterable, List, Optional, Tuple

import numpy as np

from story.exceptions import FrozenViolationError
from story.numerics.nn import Parameter, Role

logger = logging.getLogger(__name__)


def adamw_step(
    p: Parameter,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    t: int = 1,
    name: Optional[str] = None,
) -> Parameter:
    """Apply one bias-corrected AdamW update to ``p`` in place and return it."""
    if p.frozen or p.role == Role.FROZEN_BASE:
        raise FrozenViolationError(name or p.name or "<unnamed>")
    if t < 1:
        raise ValueError(f"AdamW step index must be >= 1, got {t}")
    grad = p.grad
    p.first_moment = beta1 * p.first_moment + (1.0 - beta1) * grad
    p.second_moment = beta2 * p.second_moment + (1.0 - beta2) * grad * grad
    m_hat = p.first_moment / (1.0 - beta1 ** t)
    v_hat = p.second_moment / (1.0 - beta2 ** t)
    update = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data
    p.data = (p.data - lr * update).astype(p.data.dtype)
    return p


class AdamW:
    """Optimizer over an explicit list of named, trainable parameters."""

    def __init__(
        self,
        named_params: Iterable[Tuple[str, Parameter]],
        lr: float = 1e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.named_params: List[Tuple[str, Parameter]] = list(named_params)
        for name, param in self.named_params:
            if param.frozen or param.role == Role.FROZEN_BASE:
                raise FrozenViolationError(name)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

    def zero_grad(self):
        for _, param in self.named_params:
            param.zero_grad()

    def step(self):
        self.t += 1
        for name, param in self.named_params:
            adamw_step(
                param,
                lr=self.lr,
                beta1=self.betas[0],
                beta2=self.betas[1],
                eps=self.eps,
                weight_decay=self.weight_decay,
                t=self.t,
                name=name,
            )

    def num_parameters(self) -> int:
        return int(sum(param.data.size for _, param in self.named_params))
