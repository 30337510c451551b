"""
Salient history selection.

Each history pair is fused with the current prompt independently. Block 1's
raw attention logits of all pairs are then put side by side and normalized
by one softmax per query row, so the attention mass a pair receives is
comparable across pairs. A pair's score is its mass averaged over the
non-PAD query tokens (and heads); the scores sum to 1 and the highest one
wins, ties going to the earliest pair.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from story.data.captions import caption_from_graph
from story.data.render import render_scene
from story.data.scene import OBJECT_COLORS, SHAPES, SIZES, ObjectSpec, sample_frame, sample_protagonist
from story.encoders.model import DualEncoder, TextEmbedding
from story.encoders.vocab import tokenize
from story.exceptions import EmptyContextError
from story.fusion.context import embed_history_pair
from story.fusion.model import FusionFeature, FusionModel, HistoryContext, fuse_all
from story.numerics.rng import RngStream, Stream
from story.numerics.tensor import no_grad
from story.schemas.config import Conditioning
from story.schemas.reports import LogitSummary

logger = logging.getLogger(__name__)


@dataclass
class SalienceReport:
    scores: np.ndarray
    chosen_index: int
    logit_summaries: List[LogitSummary]
    candidates: List[FusionFeature] = field(default_factory=list, repr=False)


def salience_scores(
    raw_logits: Sequence[np.ndarray], key_masks: Sequence[np.ndarray], query_mask: np.ndarray
) -> np.ndarray:
    """
    Per-pair attention mass under a joint softmax.

    ``raw_logits[i]`` is (..., Lq, Lk_i) for pair i, ``key_masks[i]`` its
    (Lk_i,) key mask and ``query_mask`` the (Lq,) current-prompt mask.
    """
    if not raw_logits:
        raise EmptyContextError("no history pairs to score", site="salience")
    query_mask = np.asarray(query_mask, dtype=bool)
    if not query_mask.any():
        raise EmptyContextError("current prompt has no tokens", site="salience")
    joint = np.concatenate([np.asarray(l, dtype=np.float64) for l in raw_logits], axis=-1)
    mask = np.concatenate([np.asarray(m, dtype=bool) for m in key_masks], axis=-1)
    joint = np.where(mask, joint, -np.inf)
    joint = joint - joint.max(axis=-1, keepdims=True)
    weights = np.exp(joint)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    bounds = np.cumsum([0] + [np.shape(l)[-1] for l in raw_logits])
    mass = np.stack([weights[..., a:b].sum(axis=-1) for a, b in zip(bounds[:-1], bounds[1:])], axis=-1)
    # mass: (..., Lq, k); average heads, then the visible queries
    mass = mass.reshape(-1, mass.shape[-2], mass.shape[-1]).mean(axis=0)
    return mass[query_mask].mean(axis=0)


def select_salient_history(
    current: TextEmbedding, histories: Sequence[HistoryContext], model: FusionModel
) -> Tuple[FusionFeature, SalienceReport]:
    """Fusion feature of the most salient history pair, plus the full score report."""
    if not histories:
        raise EmptyContextError("no history pairs to select from", site="salience")
    fused = fuse_all(current, histories, model)
    scores = salience_scores([raw for _, raw in fused], [h.mask for h in histories], current.mask)
    chosen = int(np.argmax(scores))
    summaries = []
    for (_, raw), history in zip(fused, histories):
        visible = raw[..., current.mask, :][..., history.mask]
        summaries.append(LogitSummary(mean=float(visible.mean()), max=float(visible.max())))
    report = SalienceReport(
        scores=scores, chosen_index=chosen, logit_summaries=summaries, candidates=[f for f, _ in fused]
    )
    return fused[chosen][0], report


def _disjoint_protagonist(rng: RngStream, protagonist: ObjectSpec) -> ObjectSpec:
    return ObjectSpec(
        shape=rng.choice(SHAPES, exclude=(protagonist.shape,)),
        color=rng.choice(tuple(OBJECT_COLORS), exclude=(protagonist.color,)),
        size=rng.choice(SIZES, exclude=(protagonist.size,)),
    )


def salience_relevance(
    encoder: DualEncoder,
    model: FusionModel,
    cases: int = 100,
    seed: int = 0,
    conditioning: Conditioning = Conditioning.FULL,
) -> float:
    """
    Fraction of crafted cases where the history pair sharing the current
    protagonist outscores a pair whose protagonist shares no attribute.
    """
    root = RngStream(seed, Stream.EVAL).child(0x5A1E)
    hits = 0
    with no_grad():
        for case in range(cases):
            rng = root.child(case)
            protagonist = sample_protagonist(rng)
            other = _disjoint_protagonist(rng, protagonist)
            current = sample_frame(rng, protagonist, companion_prob=0.0)
            related = sample_frame(rng, protagonist, companion_prob=0.0)
            unrelated = sample_frame(rng, other, companion_prob=0.0)
            related_first = rng.random() < 0.5
            pairs = [related, unrelated] if related_first else [unrelated, related]
            histories = [
                embed_history_pair(encoder, caption_from_graph(g), render_scene(g), conditioning, pair_index=i)
                for i, g in enumerate(pairs)
            ]
            tokens = tokenize(caption_from_graph(current), encoder.vocab, encoder.max_len)
            _, report = select_salient_history(encoder.encode_text(tokens), histories, model)
            hits += int(report.chosen_index == (0 if related_first else 1))
    rate = hits / cases
    logger.info(f"Salient pair shares the protagonist in {hits}/{cases} crafted cases ({rate:.2%})")
    return rate
