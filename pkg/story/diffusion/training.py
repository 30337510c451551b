"""
Denoiser training.

Stage 1 trains the text-conditioned base U-Net on single frames. Stage 2
freezes it and trains only the history adapter and the fusion model on
four-tuples: the previous (prompt, image) pair is fused with the current
prompt and the denoiser reconstructs the noise added to the current image.

Both stages drop the conditioning of a sample with probability
``cfg_drop_prob`` so the unconditional guidance branch stays trained; in
stage 2 the prompt and the fusion feature are dropped together.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from story.data.corpus import FourTuple
from story.denoiser.adapter import AdapterWeights, Denoiser, DenoiserInput, adapter_parameters
from story.denoiser.unet import UNet
from story.diffusion.sampling import to_model_range
from story.diffusion.schedule import NoiseSchedule, forward_diffuse
from story.encoders.model import DualEncoder, TextEmbedding
from story.encoders.vocab import tokenize_batch
from story.exceptions import ConfigError, NumericError
from story.fusion.context import embed_history
from story.fusion.model import FusionModel, HistoryContext, fuse
from story.numerics import ops
from story.numerics.optim import AdamW
from story.numerics.rng import RngStream, Stream
from story.numerics.tensor import Tensor, no_grad
from story.schemas.config import Conditioning, PipelineConfig
from story.schemas.reports import LossPoint

logger = logging.getLogger(__name__)

PointCallback = Callable[[LossPoint], None]
CheckpointCallback = Callable[[int], None]


@dataclass
class TrainBatch:
    """Embedded training examples; ``history`` is absent for base training."""

    prompt: TextEmbedding
    x0: np.ndarray
    history: Optional[HistoryContext] = None

    def __len__(self):
        return self.x0.shape[0]


def embed_frames(encoder: DualEncoder, captions: Sequence[str], images: Sequence[np.ndarray]) -> TrainBatch:
    with no_grad():
        prompt = encoder.encode_text(tokenize_batch(captions, encoder.vocab, encoder.max_len))
    return TrainBatch(prompt=prompt, x0=to_model_range(np.stack(images)).astype(prompt.tokens.dtype))


def embed_tuples(
    encoder: DualEncoder, tuples: Sequence[FourTuple], conditioning: Conditioning = Conditioning.FULL
) -> TrainBatch:
    batch = embed_frames(encoder, [t.caption for t in tuples], [t.image for t in tuples])
    batch.history = embed_history(
        encoder, [t.prev_caption for t in tuples], np.stack([t.prev_image for t in tuples]), conditioning
    )
    return batch


def training_loss(
    batch: TrainBatch,
    t: np.ndarray,
    noise: np.ndarray,
    schedule: NoiseSchedule,
    denoiser: Callable[[DenoiserInput], Tensor],
    fusion_model: Optional[FusionModel] = None,
    lam: float = 0.5,
    dropped: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean squared error between the injected noise and the prediction."""
    x_t = forward_diffuse(batch.x0, t, noise, schedule)
    prompt = batch.prompt
    lam_rows = np.full(len(batch), lam)
    if dropped is not None and dropped.any():
        prompt = TextEmbedding(tokens=prompt.tokens, mask=prompt.mask & ~dropped[:, None])
        lam_rows[dropped] = 0.0
    fusion = None
    if fusion_model is not None and batch.history is not None:
        fusion, _ = fuse(batch.prompt, batch.history, fusion_model)
    prediction = denoiser(DenoiserInput(x_t=x_t, t=t, prompt=prompt, fusion=fusion, lam=lam_rows))
    loss = ops.mse_loss(prediction, noise)
    if not np.isfinite(loss.data).all():
        raise NumericError("training loss is not finite", site="training_loss")
    return loss


class _Draws:
    """Per-purpose random streams of one training run."""

    def __init__(self, seed: int, stage: int):
        self.batch = RngStream(seed, Stream.BATCH).child(stage)
        self.timestep = RngStream(seed, Stream.TIMESTEP).child(stage)
        self.noise = RngStream(seed, Stream.NOISE).child(stage)
        self.dropout = RngStream(seed, Stream.DROPOUT).child(stage)

    def indices(self, population: int, size: int) -> np.ndarray:
        return self.batch.permutation(population)[:size]

    def step_inputs(self, shape: Tuple[int, ...], timesteps: int, drop_prob: float, dtype):
        t = self.timestep.integers(0, timesteps, size=shape[0])
        noise = self.noise.normal(shape, dtype=dtype)
        dropped = self.dropout.uniform((shape[0],)) < drop_prob
        return t, noise, dropped


def _log(stage: str, step: int, loss: float, every: int = 100):
    if step % every == 0:
        logger.info(f"{stage} step {step}: loss {loss:.4f}")


def train_base(
    unet: UNet,
    encoder: DualEncoder,
    frames: Sequence[Tuple[str, np.ndarray]],
    config: PipelineConfig,
    on_point: Optional[PointCallback] = None,
    on_checkpoint: Optional[CheckpointCallback] = None,
) -> List[LossPoint]:
    """Stage 1: train the text-conditioned base denoiser on (caption, image) frames."""
    schedule = NoiseSchedule(config.timesteps, config.beta_start, config.beta_end)
    optimizer = AdamW(unet.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    denoiser = Denoiser(unet)
    draws = _Draws(config.seed, stage=1)
    curve = []
    for step in range(config.base_steps):
        picks = draws.indices(len(frames), config.batch_size)
        batch = embed_frames(encoder, [frames[i][0] for i in picks], [frames[i][1] for i in picks])
        t, noise, dropped = draws.step_inputs(batch.x0.shape, config.timesteps, config.cfg_drop_prob, batch.x0.dtype)
        optimizer.zero_grad()
        loss = training_loss(batch, t, noise, schedule, denoiser, dropped=dropped)
        loss.backward()
        optimizer.step()
        point = LossPoint(stage="base", step=step, loss=loss.item())
        curve.append(point)
        _log("base", step, point.loss)
        if on_point:
            on_point(point)
        if on_checkpoint and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            on_checkpoint(step + 1)
    return curve


def train_adapter(
    unet: UNet,
    adapter: AdapterWeights,
    fusion_model: FusionModel,
    encoder: DualEncoder,
    tuples: Sequence[FourTuple],
    config: PipelineConfig,
    on_point: Optional[PointCallback] = None,
    on_checkpoint: Optional[CheckpointCallback] = None,
) -> List[LossPoint]:
    """Stage 2: train adapter and fusion weights against the frozen base."""
    thawed = [name for name, p in unet.named_parameters() if not p.frozen]
    if thawed:
        raise ConfigError(f"Base denoiser must be frozen before adapter training ({thawed[0]} is not)")
    schedule = NoiseSchedule(config.timesteps, config.beta_start, config.beta_end)
    optimizer = AdamW(adapter_parameters(adapter, fusion_model), lr=config.lr, weight_decay=config.weight_decay)
    logger.info(f"Training {optimizer.num_parameters()} adapter+fusion parameters against {unet.num_parameters()} frozen")
    denoiser = Denoiser(unet, adapter)
    draws = _Draws(config.seed, stage=2)
    curve = []
    for step in range(config.adapter_steps):
        picks = draws.indices(len(tuples), config.batch_size)
        batch = embed_tuples(encoder, [tuples[i] for i in picks])
        t, noise, dropped = draws.step_inputs(batch.x0.shape, config.timesteps, config.cfg_drop_prob, batch.x0.dtype)
        optimizer.zero_grad()
        loss = training_loss(
            batch, t, noise, schedule, denoiser, fusion_model=fusion_model, lam=config.lambda_, dropped=dropped
        )
        loss.backward()
        optimizer.step()
        point = LossPoint(stage="adapter", step=step, loss=loss.item())
        curve.append(point)
        _log("adapter", step, point.loss)
        if on_point:
            on_point(point)
        if on_checkpoint and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            on_checkpoint(step + 1)
    return curve
