"""
Multi-modal history fusion.

A history (prompt, image) pair becomes one key/value sequence, text rows
first, and the current prompt reads it through ``d`` pre-norm blocks of
cross-attention and feed-forward. The result is one vector per current-prompt
token, the fusion feature that conditions the history adapter.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from story.encoders.model import ImageEmbedding, TextEmbedding
from story.exceptions import DimensionError, EmptyContextError
from story.numerics import ops
from story.numerics.nn import FeedForward, LayerNorm, Linear, Module, Role
from story.numerics.rng import RngStream
from story.numerics.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class HistoryContext:
    """Key/value rows of one history pair; ``mask`` is True on attendable rows."""

    keys: Tensor
    mask: np.ndarray
    text_length: int
    pair_index: int = 0

    @property
    def length(self) -> int:
        return self.keys.shape[-2]


@dataclass
class FusionFeature:
    """(Lq, D) or (B, Lq, D) fusion rows aligned to the current prompt tokens."""

    features: Tensor
    mask: np.ndarray
    source_index: int = 0
    block_logits: List[np.ndarray] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.features.shape[-2]


def concat_history(
    cp: Optional[TextEmbedding],
    ci: Optional[ImageEmbedding],
    pair_index: int = 0,
) -> HistoryContext:
    """Stack prompt tokens over image patches; either side may be left out."""
    parts, masks = [], []
    if cp is not None:
        parts.append(cp.tokens)
        masks.append(cp.mask)
    if ci is not None:
        parts.append(ci.patches)
        masks.append(ci.mask)
    if not parts:
        raise EmptyContextError("history pair has neither prompt nor image", site="concat_history")
    if len({p.shape[-1] for p in parts}) != 1:
        raise DimensionError(f"prompt and image embeddings differ in width: {[p.shape for p in parts]}")
    keys = parts[0] if len(parts) == 1 else ops.concat(parts, axis=-2)
    mask = masks[0] if len(masks) == 1 else np.concatenate(masks, axis=-1)
    return HistoryContext(
        keys=keys,
        mask=mask,
        text_length=cp.length if cp is not None else 0,
        pair_index=pair_index,
    )


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, D) -> (..., H, L, D/H)."""
    *lead, length, dim = x.shape
    if dim % heads:
        raise DimensionError(f"width {dim} does not split into {heads} heads")
    x = x.reshape(*lead, length, heads, dim // heads)
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2)


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, width = x.shape
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, length, heads * width)


class FusionBlock(Module):
    def __init__(self, rng: RngStream, dim: int, heads: int = 1):
        role = Role.TRAINABLE_FUSION
        self.heads = heads
        self.norm_attn = LayerNorm(dim, role)
        self.query = Linear(rng, dim, dim, role, bias=False)
        self.key = Linear(rng, dim, dim, role, bias=False)
        self.value = Linear(rng, dim, dim, role, bias=False)
        self.out = Linear(rng, dim, dim, role)
        self.norm_ffn = LayerNorm(dim, role)
        self.ffn = FeedForward(rng, dim, role)

    def __call__(self, x: Tensor, history: HistoryContext) -> Tuple[Tensor, Tensor]:
        q = split_heads(self.query(self.norm_attn(x)), self.heads)
        k = split_heads(self.key(history.keys), self.heads)
        v = split_heads(self.value(history.keys), self.heads)
        key_mask = np.expand_dims(history.mask, -2)
        attended, logits = ops.scaled_dot_attention(q, k, v, key_mask=key_mask)
        x = x + self.out(merge_heads(attended))
        x = x + self.ffn(self.norm_ffn(x))
        return x, logits


class FusionModel(Module):
    """``blocks`` stacked fusion blocks; block 1 takes the current prompt as queries."""

    def __init__(self, rng: RngStream, dim: int = 64, blocks: int = 4, heads: int = 1):
        self.dim = dim
        self.heads = heads
        self.blocks = [FusionBlock(rng, dim, heads) for _ in range(blocks)]

    def fuse(self, current: TextEmbedding, history: HistoryContext) -> Tuple[FusionFeature, List[np.ndarray]]:
        return fuse(current, history, self)

    def fuse_all(self, current: TextEmbedding, histories: Sequence[HistoryContext]):
        return fuse_all(current, histories, self)


def fuse(current: TextEmbedding, history: HistoryContext, model: FusionModel) -> Tuple[FusionFeature, List[np.ndarray]]:
    """
    Read ``history`` through the current prompt.

    Returns the fusion feature and every block's pre-softmax logits, each
    shaped (..., heads, Lq, Lk). Rows at PAD query positions are exactly zero.
    """
    if not current.mask.any(axis=-1).all():
        raise EmptyContextError("current prompt has no tokens", site="fuse")
    if history.length == 0 or not history.mask.any(axis=-1).all():
        raise EmptyContextError("history context is empty", site="fuse")
    if current.dim != history.keys.shape[-1]:
        raise DimensionError(f"prompt width {current.dim} differs from history width {history.keys.shape[-1]}")
    x = current.tokens
    logits = []
    for block in model.blocks:
        x, block_logits = block(x, history)
        logits.append(block_logits.data)
    x = x * current.mask[..., None].astype(x.dtype)
    feature = FusionFeature(features=x, mask=current.mask.copy(), source_index=history.pair_index, block_logits=logits)
    return feature, logits


def fuse_all(
    current: TextEmbedding, histories: Sequence[HistoryContext], model: FusionModel
) -> List[Tuple[FusionFeature, np.ndarray]]:
    """Fuse every pair independently; the score is block 1's raw logit matrix."""
    if not histories:
        raise EmptyContextError("no history pairs to fuse", site="fuse_all")
    results = []
    for history in histories:
        feature, logits = fuse(current, history, model)
        results.append((feature, logits[0]))
    return results


def mean_fusion(features: Sequence[FusionFeature]) -> FusionFeature:
    """Average of several fusion features over the same current prompt."""
    if not features:
        raise EmptyContextError("no fusion features to average", site="all_mean")
    total = features[0].features
    for feature in features[1:]:
        total = total + feature.features
    return FusionFeature(
        features=total * (1.0 / len(features)),
        mask=features[0].mask.copy(),
        source_index=-1,
    )
