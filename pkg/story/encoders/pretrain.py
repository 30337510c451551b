"""
Stage 0: contrastive pretraining of the dual encoder.

Symmetric InfoNCE over pooled embeddings with a learnable logit scale. The
returned encoder is frozen; it is reused as the metric backbone.
"""

import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from story.encoders.model import DualEncoder, pooled_embedding
from story.encoders.vocab import tokenize_batch
from story.numerics import ops
from story.numerics.nn import Role
from story.numerics.optim import AdamW
from story.numerics.rng import RngStream
from story.numerics.tensor import Tensor, no_grad
from story.schemas.reports import LossPoint

logger = logging.getLogger(__name__)

MAX_LOG_SCALE = math.log(100.0)

Pair = Tuple[str, np.ndarray]


def info_nce_loss(encoder: DualEncoder, captions: Sequence[str], images: np.ndarray) -> Tensor:
    """Mean of caption->image and image->caption cross-entropy on the diagonal."""
    tokens = tokenize_batch(captions, encoder.vocab, encoder.max_len)
    text = pooled_embedding(encoder.encode_text(tokens))
    image = pooled_embedding(encoder.encode_image(images))
    logits = (text @ image.T) * encoder.log_scale.exp()
    diagonal = np.eye(len(captions), dtype=logits.dtype)
    rows = (ops.log_softmax_lastdim(logits) * diagonal).sum()
    cols = (ops.log_softmax_lastdim(logits.T) * diagonal).sum()
    return (rows + cols) * (-0.5 / len(captions))


def _distinct(batch: Sequence[Pair]) -> List[Pair]:
    seen = set()
    kept = []
    for caption, image in batch:
        if caption not in seen:
            seen.add(caption)
            kept.append((caption, image))
    return kept


def contrastive_pretrain(
    encoder: DualEncoder,
    pairs: Sequence[Pair],
    steps: int,
    rng: RngStream,
    batch_size: int = 16,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    on_step: Optional[Callable[[LossPoint], None]] = None,
) -> Tuple[DualEncoder, List[LossPoint]]:
    """Train ``encoder`` in place, freeze it and return it with its loss curve."""
    if len(pairs) < 2:
        raise ValueError("Contrastive pretraining needs at least 2 pairs")
    optimizer = AdamW(encoder.named_parameters(), lr=lr, weight_decay=weight_decay)
    curve = []
    skipped = 0
    for step in range(steps):
        picks = rng.permutation(len(pairs))[:batch_size]
        batch = _distinct([pairs[i] for i in picks])
        if len(batch) < 2:
            skipped += 1
            logger.warning(f"Degenerate contrastive batch at step {step} (fewer than 2 distinct captions), skipped")
            continue
        optimizer.zero_grad()
        loss = info_nce_loss(encoder, [c for c, _ in batch], np.stack([i for _, i in batch]))
        loss.backward()
        optimizer.step()
        encoder.log_scale.data = np.minimum(encoder.log_scale.data, MAX_LOG_SCALE)
        point = LossPoint(stage="encoders", step=step, loss=loss.item())
        curve.append(point)
        if on_step is not None:
            on_step(point)
        if step % 100 == 0:
            logger.info(f"encoder step {step}: loss {point.loss:.4f} scale {math.exp(encoder.log_scale.item()):.2f}")
    if skipped:
        logger.warning(f"Skipped {skipped} degenerate batches out of {steps}")
    encoder.set_role(Role.ENCODER)
    encoder.freeze()
    return encoder, curve


def similarity_matrix(encoder: DualEncoder, captions: Sequence[str], images: np.ndarray) -> np.ndarray:
    """Cosine similarity of every caption (rows) against every image (columns)."""
    with no_grad():
        tokens = tokenize_batch(captions, encoder.vocab, encoder.max_len)
        text = pooled_embedding(encoder.encode_text(tokens))
        image = pooled_embedding(encoder.encode_image(images))
    return text.data @ image.data.T


def retrieval_accuracy(encoder: DualEncoder, pairs: Sequence[Pair]) -> float:
    """Top-1 caption->image accuracy over the ``len(pairs)``-way candidate set."""
    sims = similarity_matrix(encoder, [c for c, _ in pairs], np.stack([i for _, i in pairs]))
    return float(np.mean(np.argmax(sims, axis=1) == np.arange(len(pairs))))


def matched_beats_mismatched(encoder: DualEncoder, pairs: Sequence[Pair]) -> float:
    """Fraction of pairs whose own image scores above a shifted, mismatched image."""
    sims = similarity_matrix(encoder, [c for c, _ in pairs], np.stack([i for _, i in pairs]))
    n = len(pairs)
    matched = np.diag(sims)
    mismatched = sims[np.arange(n), (np.arange(n) + 1) % n]
    return float(np.mean(matched > mismatched))
