"""
Assembling the models of a run from a config or a checkpoint.

Each model draws its initial weights from its own child of the INIT stream,
so adding a model never changes another model's initialization.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional

from story.denoiser.adapter import AdapterWeights, Denoiser
from story.denoiser.unet import UNet
from story.encoders.model import DualEncoder
from story.encoders.vocab import Vocabulary
from story.engine.story import StoryGenerator
from story.exceptions import ConfigError, DataFormatError
from story.fusion.model import FusionModel
from story.numerics.nn import Module
from story.numerics.rng import RngStream, Stream
from story.persistence.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from story.schemas.config import Conditioning, HistoryMode, PipelineConfig, build_config

logger = logging.getLogger(__name__)

ENCODER_STREAM, UNET_STREAM, ADAPTER_STREAM, FUSION_STREAM = range(4)


@dataclass
class PipelineModels:
    config: PipelineConfig
    vocab: Vocabulary
    encoder: DualEncoder
    unet: UNet
    adapter: Optional[AdapterWeights] = None
    fusion: Optional[FusionModel] = None

    def modules(self) -> Dict[str, Module]:
        modules = {"encoder": self.encoder, "unet": self.unet}
        if self.adapter is not None:
            modules["adapter"] = self.adapter
        if self.fusion is not None:
            modules["fusion"] = self.fusion
        return modules

    def denoiser(self, base_only: bool = False) -> Denoiser:
        return Denoiser(self.unet, None if base_only else self.adapter)

    def save(self, path, **meta) -> str:
        meta = {"config": self.config.resolved(), "vocab": self.vocab.tokens, **meta}
        return save_checkpoint(self.modules(), path, meta=meta)


def _stream(config: PipelineConfig, index: int) -> RngStream:
    return RngStream(config.seed, Stream.INIT).child(index)


def build_encoder(config: PipelineConfig, vocab: Vocabulary) -> DualEncoder:
    return DualEncoder(
        _stream(config, ENCODER_STREAM),
        vocab,
        dim=config.common_dim,
        max_len=config.max_len,
        image_size=config.image_size,
        patch=config.patch,
        blocks=config.encoder_blocks,
    )


def build_unet(config: PipelineConfig) -> UNet:
    return UNet(
        _stream(config, UNET_STREAM),
        context_dim=config.common_dim,
        channels=config.unet_channels,
        time_dim=config.time_dim,
        groups=config.groups,
        image_size=config.image_size,
    )


def build_adapter(config: PipelineConfig, unet: UNet) -> AdapterWeights:
    return AdapterWeights(_stream(config, ADAPTER_STREAM), unet)


def build_fusion(config: PipelineConfig) -> FusionModel:
    return FusionModel(
        _stream(config, FUSION_STREAM), dim=config.common_dim, blocks=config.fusion_blocks, heads=config.fusion_heads
    )


def build_models(config: PipelineConfig, vocab: Optional[Vocabulary] = None, with_adapter: bool = False) -> PipelineModels:
    vocab = vocab or Vocabulary.from_grammar()
    unet = build_unet(config)
    models = PipelineModels(config=config, vocab=vocab, encoder=build_encoder(config, vocab), unet=unet)
    if with_adapter:
        models.adapter = build_adapter(config, unet)
        models.fusion = build_fusion(config)
    return models


def load_models(path, overrides: Optional[Dict[str, Any]] = None) -> PipelineModels:
    """
    Rebuild every model stored in a checkpoint.

    The checkpoint's own config wins for everything except keys in
    ``overrides`` (training lengths, sampler settings and the like).
    """
    checkpoint: Checkpoint = load_checkpoint(path)
    if "config" not in checkpoint.meta or "vocab" not in checkpoint.meta:
        raise DataFormatError(f"Checkpoint {path} carries no config or vocabulary")
    values = dict(checkpoint.meta["config"])
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    config = build_config(values)
    vocab = Vocabulary(checkpoint.meta["vocab"])
    has_adapter = any(name.startswith("adapter.") for name in checkpoint.tensors)
    models = build_models(config, vocab, with_adapter=has_adapter)
    for prefix, module in models.modules().items():
        checkpoint.load_into(module, prefix)
    logger.info(f"Loaded {', '.join(models.modules())} from {path}")
    return models


def story_generator(
    models: PipelineModels,
    lam: Optional[float] = None,
    conditioning: Optional[Conditioning] = None,
    history_mode: Optional[HistoryMode] = None,
    base_only: bool = False,
) -> StoryGenerator:
    """
    Generator over loaded models. ``base_only`` samples with the frozen base
    alone (lambda 0); a checkpoint without adapter weights allows nothing else.
    """
    fusion = models.fusion
    if fusion is None:
        if not base_only:
            raise ConfigError("Checkpoint has no adapter or fusion weights; generate with --base-only")
        # ranks histories for the salience log only, lambda 0 keeps it out of the image
        fusion = build_fusion(models.config)
    return StoryGenerator(
        models.encoder,
        fusion,
        models.denoiser(base_only=base_only),
        models.config,
        lam=0.0 if base_only else lam,
        conditioning=conditioning,
        history_mode=history_mode,
    )
