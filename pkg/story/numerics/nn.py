"""
Parameters and a minimal module tree.

A Module owns Parameters (directly, in child Modules, or in lists of child
Modules); parameter names are the dotted attribute paths, which is also how
they are stored in checkpoints.
"""

import logging
from enum import Enum
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from story.exceptions import DimensionError
from story.numerics import ops
from story.numerics.rng import RngStream
from story.numerics.tensor import Tensor, default_dtype

logger = logging.getLogger(__name__)


class Role(str, Enum):
    # Stage-1 denoiser weights while they are still being pretrained.
    BASE = "base"
    FROZEN_BASE = "frozen-base"
    TRAINABLE_ADAPTER = "trainable-adapter"
    TRAINABLE_FUSION = "trainable-fusion"
    ENCODER = "encoder"


class Parameter(Tensor):
    """A named leaf tensor with a role tag, gradient and AdamW moments."""

    def __init__(self, data, role: Role, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)
        self.role = Role(role)
        self.frozen = False
        self.grad = np.zeros_like(self.data)
        self.first_moment = np.zeros_like(self.data)
        self.second_moment = np.zeros_like(self.data)
        if self.role == Role.FROZEN_BASE:
            self.freeze()

    def freeze(self):
        self.frozen = True
        self.requires_grad = False

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def assign(self, values: np.ndarray):
        values = np.asarray(values)
        if values.shape != self.data.shape:
            raise DimensionError(f"cannot assign {values.shape} into parameter {self.name} of shape {self.shape}")
        self.data = np.array(values, dtype=self.data.dtype, order="C")
        self.grad = np.zeros_like(self.data)
        self.first_moment = np.zeros_like(self.data)
        self.second_moment = np.zeros_like(self.data)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f"{prefix}{attr}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{index}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{key}.")

    def parameters(self):
        return [param for _, param in self.named_parameters()]

    def state_dict(self) -> Dict[str, Parameter]:
        return dict(self.named_parameters())

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True):
        params = self.state_dict()
        missing = sorted(set(params) - set(arrays))
        if strict and missing:
            raise DimensionError(f"missing tensors for {type(self).__name__}: {', '.join(missing[:5])}")
        for name, param in params.items():
            if name in arrays:
                param.assign(arrays[name])

    def set_role(self, role: Role):
        for _, param in self.named_parameters():
            param.role = Role(role)
            if param.role == Role.FROZEN_BASE:
                param.freeze()

    def freeze(self):
        for param in self.parameters():
            param.freeze()

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(param.data.size for param in self.parameters()))

    def astype(self, dtype):
        for param in self.parameters():
            param.assign(param.data.astype(dtype))
        return self


def init_param(rng: RngStream, shape, role: Role, std: Optional[float] = None, fill: Optional[float] = None) -> Parameter:
    """Gaussian init scaled by fan-in unless ``fill`` asks for a constant."""
    if fill is not None:
        return Parameter(np.full(shape, fill, dtype=default_dtype()), role)
    if std is None:
        std = 1.0 / np.sqrt(shape[0])
    return Parameter(rng.normal(shape) * std, role)


class Linear(Module):
    def __init__(self, rng: RngStream, d_in: int, d_out: int, role: Role, bias: bool = True, zero: bool = False):
        self.weight = init_param(rng, (d_in, d_out), role, fill=0.0 if zero else None)
        self.bias = init_param(rng, (d_out,), role, fill=0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, role: Role):
        self.gain = Parameter(np.ones(dim, dtype=default_dtype()), role)
        self.bias = Parameter(np.zeros(dim, dtype=default_dtype()), role)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    """Pre-activation MLP d -> mult*d -> d with GELU."""

    def __init__(self, rng: RngStream, dim: int, role: Role, mult: int = 4):
        self.inner = Linear(rng, dim, mult * dim, role)
        self.outer = Linear(rng, mult * dim, dim, role)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ops.gelu(self.inner(x)))
