"""Tiny model configurations shared by the test modules."""

import numpy as np

from story.data.corpus import generate_corpus
from story.encoders.model import TextEmbedding
from story.fusion.model import HistoryContext
from story.numerics.rng import RngStream, Stream
from story.numerics.tensor import Tensor
from story.pipeline import build_models
from story.schemas.config import build_config

TINY = {
    "common_dim": 8,
    "encoder_blocks": 1,
    "patch": 8,
    "fusion_blocks": 2,
    "unet_channels": (8, 16),
    "groups": 4,
    "time_dim": 8,
    "timesteps": 20,
    "sampler_steps": 2,
    "guidance_scale": 3.0,
    "batch_size": 2,
    "encoder_steps": 2,
    "base_steps": 2,
    "adapter_steps": 2,
    "checkpoint_every": 0,
}

TINY_FILE = """\
# tiny pipeline for command tests
common_dim=8
encoder_blocks=1
patch=8
fusion_blocks=2
unet_channels=8,16
groups=4
time_dim=8
timesteps=20
sampler_steps=2
guidance_scale=3.0
batch_size=2
encoder_steps=2
base_steps=2
adapter_steps=2
checkpoint_every=1
stories=2
frames=3
"""


def tiny_config(**overrides):
    return build_config({**TINY, **overrides})


def tiny_models(with_adapter: bool = True, **overrides):
    return build_models(tiny_config(**overrides), with_adapter=with_adapter)


def tiny_corpus(stories: int = 2, frames: int = 3, seed: int = 0, first_id: int = 0):
    return generate_corpus(seed=seed, stories=stories, frames=frames, first_id=first_id)


def random_prompt(rng: RngStream, batch: int, length: int, dim: int, visible: int = None) -> TextEmbedding:
    mask = np.zeros((batch, length), dtype=bool)
    mask[:, :visible or length] = True
    return TextEmbedding(tokens=Tensor(rng.normal((batch, length, dim))), mask=mask)


def random_history(rng: RngStream, batch: int, length: int, dim: int) -> HistoryContext:
    return HistoryContext(
        keys=Tensor(rng.normal((batch, length, dim))), mask=np.ones((batch, length), dtype=bool), text_length=length
    )


def stream_for(index: int = 0) -> RngStream:
    return RngStream(1234, Stream.EVAL).child(index)
