"""
Differentiable operations used by the encoders, fusion model and denoiser.

Images are channel-last (batch, height, width, channels) so that every affine
map acts on the last dimension.
"""

import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from story.exceptions import DimensionError, EmptyContextError
from story.numerics.tensor import Tensor, as_tensor, unbroadcast

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the two trailing axes."""
    a, b = as_tensor(a), as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        grad_a = g @ np.swapaxes(b_data, -1, -2)
        grad_b = np.swapaxes(a_data, -1, -2) @ g
        return unbroadcast(grad_a, a_data.shape), unbroadcast(grad_b, b_data.shape)

    return Tensor.from_op(a_data @ b_data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis with max-subtraction.

    ``mask`` (broadcastable boolean, True = keep) removes positions from the
    normalization; removed positions get exactly zero probability.
    """
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dim, got shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=-1).all():
            raise EmptyContextError("softmax row has every position masked", site="softmax")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(s, (x,), backward, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, key_mask: Optional[np.ndarray] = None
) -> Tuple[Tensor, Tensor]:
    """
    softmax(Q K^T / sqrt(d)) V over any leading batch dims.

    Returns the attended output and the raw pre-softmax logits. ``key_mask``
    has shape (..., Lk) with True marking keys that may be attended.
    """
    if k.shape[-2] == 0:
        raise EmptyContextError("attention over an empty context", site="attention")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key feature dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    logits = matmul(q, k.swap_last()) * (1.0 / math.sqrt(q.shape[-1]))
    mask = None if key_mask is None else np.expand_dims(np.asarray(key_mask, dtype=bool), -2)
    weights = softmax_lastdim(logits, mask)
    return matmul(weights, v), logits


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise DimensionError(f"layer_norm affine shape {gain.shape} does not fit input {x.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Group norm for channel-last feature maps of shape (B, H, W, C)."""
    batch, height, width, channels = x.shape
    if channels % groups:
        raise DimensionError(f"{channels} channels do not split into {groups} groups")
    grouped = x.reshape(batch, height * width, groups, channels // groups)
    mean = grouped.mean(axis=(1, 3), keepdims=True)
    centered = grouped - mean
    var = (centered * centered).mean(axis=(1, 3), keepdims=True)
    normed = (centered / (var + eps).sqrt()).reshape(batch, height, width, channels)
    return normed * gain + bias


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -a))


def silu(x: Tensor) -> Tensor:
    a = x.data
    s = _sigmoid(a)

    def backward(g):
        return (g * (s + a * s * (1.0 - s)),)

    return Tensor.from_op(a * s, (x,), backward, "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    a = x.data
    inner = _GELU_C * (a + 0.044715 * a ** 3)
    t = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * a ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)

    return Tensor.from_op(0.5 * a * (1.0 + t), (x,), backward, "gelu")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(data, tuple(tensors), backward, "concat")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]

    def backward(g):
        full = np.zeros((rows,) + g.shape[ids.ndim:], dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor.from_op(table.data[ids], (table,), backward, "embedding")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """
    Channel-last convolution via im2col.

    ``weight`` is stored flattened as (kernel * kernel * C_in, C_out).
    """
    batch, height, width, channels = x.shape
    if weight.shape[0] != kernel * kernel * channels:
        raise DimensionError(f"conv weight {weight.shape} does not match {channels} input channels")
    out_h = (height + 2 * padding - kernel) // stride + 1
    out_w = (width + 2 * padding - kernel) // stride + 1
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((batch, out_h, out_w, kernel, kernel, channels), dtype=x.data.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, :, i, j, :] = padded[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride, :]
    flat = cols.reshape(batch, out_h, out_w, kernel * kernel * channels)
    w_data = weight.data
    out = flat @ w_data + bias.data

    def backward(g):
        grad_w = flat.reshape(-1, flat.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        grad_b = g.sum(axis=(0, 1, 2))
        grad_cols = (g @ w_data.T).reshape(cols.shape)
        grad_padded = np.zeros_like(padded)
        for i in range(kernel):
            for j in range(kernel):
                grad_padded[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride, :] += grad_cols[:, :, :, i, j, :]
        grad_x = grad_padded[:, padding:padding + height, padding:padding + width, :]
        return grad_x, grad_w, grad_b

    return Tensor.from_op(out, (x, weight, bias), backward, "conv2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    batch, height, width, channels = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(batch, height, 2, width, 2, channels).sum(axis=(2, 4)),)

    return Tensor.from_op(out, (x,), backward, "upsample")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the sequence axis (-2) of positions where ``mask`` is True."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=-1, keepdims=True)
    if (counts == 0).any():
        raise EmptyContextError("masked mean over an all-padding sequence", site="pool")
    weights = (mask / counts).astype(x.data.dtype)
    return (x * weights[..., None]).sum(axis=-2)


def l2_normalize(x: Tensor) -> Tensor:
    return x / (x * x).sum(axis=-1, keepdims=True).sqrt()


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target, like=pred)
    return (diff * diff).mean()
