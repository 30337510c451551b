"""Encoding history pairs into fusion contexts under the conditioning modes."""

from typing import Sequence

import numpy as np

from story.encoders.model import DualEncoder
from story.encoders.vocab import tokenize, tokenize_batch
from story.fusion.model import HistoryContext, concat_history
from story.numerics.tensor import no_grad
from story.schemas.config import Conditioning


def embed_history(
    encoder: DualEncoder,
    captions: Sequence[str],
    images: np.ndarray,
    conditioning: Conditioning = Conditioning.FULL,
    pair_index: int = 0,
) -> HistoryContext:
    """
    Batched history contexts; ``image_only`` leaves out the history prompt and
    ``text_only`` the history image. ``prompt_only`` keeps both: it disables
    the adapter rather than changing the context.
    """
    conditioning = Conditioning(conditioning)
    with no_grad():
        cp = None
        ci = None
        if conditioning != Conditioning.IMAGE_ONLY:
            cp = encoder.encode_text(tokenize_batch(captions, encoder.vocab, encoder.max_len))
        if conditioning != Conditioning.TEXT_ONLY:
            ci = encoder.encode_image(images)
    return concat_history(cp, ci, pair_index=pair_index)


def embed_history_pair(
    encoder: DualEncoder,
    caption: str,
    image: np.ndarray,
    conditioning: Conditioning = Conditioning.FULL,
    pair_index: int = 0,
) -> HistoryContext:
    """Single (unbatched) history pair."""
    conditioning = Conditioning(conditioning)
    with no_grad():
        cp = None
        ci = None
        if conditioning != Conditioning.IMAGE_ONLY:
            cp = encoder.encode_text(tokenize(caption, encoder.vocab, encoder.max_len))
        if conditioning != Conditioning.TEXT_ONLY:
            ci = encoder.encode_image(image)
    return concat_history(cp, ci, pair_index=pair_index)
