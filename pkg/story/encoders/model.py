"""
Toy dual text/image encoder standing in for a pretrained CLIP.

Both towers are small pre-norm transformers ending in a projection head into
a shared ``common_dim`` space. Token-level outputs condition the fusion model
and the denoiser; their masked mean, L2-normalized, is the pooled embedding
used for retrieval and the CLIP-style metrics.
"""

import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from story.encoders.vocab import TokenSequence, Vocabulary
from story.exceptions import DimensionError, EmptyContextError
from story.numerics import ops
from story.numerics.nn import FeedForward, LayerNorm, Linear, Module, Parameter, Role, init_param
from story.numerics.rng import RngStream
from story.numerics.tensor import Tensor, default_dtype

logger = logging.getLogger(__name__)


@dataclass
class TextEmbedding:
    """(L, D) or (B, L, D) token embeddings; ``mask`` is True on non-PAD rows."""

    tokens: Tensor
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class ImageEmbedding:
    """(P, D) or (B, P, D) patch embeddings; every patch is valid."""

    patches: Tensor

    @property
    def mask(self) -> np.ndarray:
        return np.ones(self.patches.shape[:-1], dtype=bool)

    @property
    def length(self) -> int:
        return self.patches.shape[-2]

    @property
    def dim(self) -> int:
        return self.patches.shape[-1]


class SelfAttentionBlock(Module):
    def __init__(self, rng: RngStream, dim: int, role: Role):
        self.norm1 = LayerNorm(dim, role)
        self.query = Linear(rng, dim, dim, role, bias=False)
        self.key = Linear(rng, dim, dim, role, bias=False)
        self.value = Linear(rng, dim, dim, role, bias=False)
        self.out = Linear(rng, dim, dim, role)
        self.norm2 = LayerNorm(dim, role)
        self.ffn = FeedForward(rng, dim, role)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.norm1(x)
        attended, _ = ops.scaled_dot_attention(self.query(h), self.key(h), self.value(h), key_mask=mask)
        x = x + self.out(attended)
        return x + self.ffn(self.norm2(x))


class TextEncoder(Module):
    def __init__(self, rng: RngStream, vocab_size: int, max_len: int, dim: int, blocks: int):
        role = Role.ENCODER
        self.max_len = max_len
        self.token_table = init_param(rng, (vocab_size, dim), role, std=0.02 * math.sqrt(dim))
        self.position_table = init_param(rng, (max_len, dim), role, std=0.02 * math.sqrt(dim))
        self.blocks = [SelfAttentionBlock(rng, dim, role) for _ in range(blocks)]
        self.norm = LayerNorm(dim, role)
        self.head = Linear(rng, dim, dim, role)

    def __call__(self, tokens: TokenSequence) -> TextEmbedding:
        if tokens.ids.shape[-1] != self.max_len:
            raise DimensionError(f"expected {self.max_len} token positions, got {tokens.ids.shape[-1]}")
        x = ops.embedding(self.token_table, tokens.ids) + self.position_table
        for block in self.blocks:
            x = block(x, tokens.mask)
        x = self.head(self.norm(x))
        x = x * tokens.mask[..., None].astype(x.dtype)
        return TextEmbedding(tokens=x, mask=tokens.mask.copy())


class ImageEncoder(Module):
    def __init__(self, rng: RngStream, image_size: int, patch: int, dim: int, blocks: int):
        role = Role.ENCODER
        if image_size % patch:
            raise DimensionError(f"image size {image_size} is not a multiple of patch {patch}")
        self.image_size = image_size
        self.patch = patch
        self.num_patches = (image_size // patch) ** 2
        self.patch_proj = Linear(rng, patch * patch * 3, dim, role)
        self.position_table = init_param(rng, (self.num_patches, dim), role, std=0.02 * math.sqrt(dim))
        self.blocks = [SelfAttentionBlock(rng, dim, role) for _ in range(blocks)]
        self.norm = LayerNorm(dim, role)
        self.head = Linear(rng, dim, dim, role)

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(..., H, W, 3) in [0, 1] -> (..., P, patch*patch*3) in [-1, 1]."""
        images = np.asarray(images, dtype=default_dtype())
        if images.shape[-3:] != (self.image_size, self.image_size, 3):
            raise DimensionError(f"expected {self.image_size}x{self.image_size}x3 images, got {images.shape}")
        lead = images.shape[:-3]
        g, p = self.image_size // self.patch, self.patch
        x = images.reshape(*lead, g, p, g, p, 3)
        x = np.moveaxis(x, -4, -3).reshape(*lead, g * g, p * p * 3)
        return x * 2.0 - 1.0

    def __call__(self, images: np.ndarray) -> ImageEmbedding:
        x = self.patch_proj(Tensor(self.patchify(images))) + self.position_table
        mask = np.ones(x.shape[:-1], dtype=bool)
        for block in self.blocks:
            x = block(x, mask)
        return ImageEmbedding(patches=self.head(self.norm(x)))


class DualEncoder(Module):
    def __init__(
        self,
        rng: RngStream,
        vocab: Vocabulary,
        dim: int = 64,
        max_len: int = 32,
        image_size: int = 32,
        patch: int = 4,
        blocks: int = 2,
    ):
        self.vocab = vocab
        self.dim = dim
        self.max_len = max_len
        self.text = TextEncoder(rng, len(vocab), max_len, dim, blocks)
        self.image = ImageEncoder(rng, image_size, patch, dim, blocks)
        # log of the logit scale; scale 1 at init keeps the initial InfoNCE
        # loss at ln(batch size)
        self.log_scale = Parameter(np.zeros(1, dtype=default_dtype()), Role.ENCODER)

    def encode_text(self, tokens: TokenSequence) -> TextEmbedding:
        return self.text(tokens)

    def encode_image(self, images: np.ndarray) -> ImageEmbedding:
        return self.image(images)


def pooled_embedding(embedding: Union[TextEmbedding, ImageEmbedding]) -> Tensor:
    """Masked mean over positions, then L2-normalized."""
    mask = embedding.mask
    values = embedding.tokens if isinstance(embedding, TextEmbedding) else embedding.patches
    if not mask.any(axis=-1).all():
        raise EmptyContextError("pooled embedding of an all-padding input", site="pool")
    return ops.l2_normalize(ops.masked_mean(values, mask))
