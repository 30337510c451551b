"""Finite-difference verification of analytic gradients."""

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from story.exceptions import NumericError
from story.numerics.nn import Parameter
from story.numerics.rng import RngStream, Stream
from story.numerics.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_grad():
        value = f()
    value = float(np.asarray(value.data).reshape(()))
    if not np.isfinite(value):
        raise NumericError("grad_check objective is not finite", site="grad_check")
    return value


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    coords_per_param: int = 6,
    rng: Optional[RngStream] = None,
) -> float:
    """
    Compare backprop gradients of the scalar ``f()`` against central differences.

    Returns the max over sampled coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``. Parameters must be float64.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError(f"perturbation h={h} outside [1e-4, 1e-2]")
    for param in params:
        if param.data.dtype != np.float64:
            raise NumericError("grad_check needs 64-bit parameters", site="grad_check")
    rng = rng or RngStream(0, Stream.EVAL)

    for param in params:
        if isinstance(param, Parameter):
            param.zero_grad()
        else:
            param.grad = None
    out = f()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NumericError("grad_check objective must be a finite scalar", site="grad_check")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for param, grad in zip(params, analytic):
        flat = param.data.reshape(-1)
        if flat.size <= coords_per_param:
            coords = np.arange(flat.size)
        else:
            coords = rng.permutation(flat.size)[:coords_per_param]
        for coord in coords:
            original = flat[coord]
            flat[coord] = original + h
            plus = _evaluate(f)
            flat[coord] = original - h
            minus = _evaluate(f)
            flat[coord] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = grad.reshape(-1)[coord]
            error = abs(exact - numeric) / max(1.0, abs(exact))
            worst = max(worst, error)
    logger.debug(f"grad_check over {len(params)} tensors: max relative error {worst:.3e}")
    return worst
