"""
DDIM sampling with classifier-free guidance.

Every step calls the denoiser twice, once with the prompt and fusion feature
and once unconditionally (null prompt, no fusion feature), and combines the
two predictions with the guidance scale.
"""

import logging
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from story.denoiser.adapter import DenoiserInput, Lam
from story.diffusion.schedule import NoiseSchedule
from story.encoders.model import TextEmbedding
from story.exceptions import NumericError
from story.fusion.model import FusionFeature
from story.numerics.rng import RngStream, Stream
from story.numerics.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DenoiseFn = Callable[[DenoiserInput], Tensor]


class SamplerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    steps: int = Field(50, ge=1)
    guidance_scale: float = Field(5.0, ge=0.0)
    eta: float = Field(0.0, ge=0.0)
    seed: int = 0


def sampling_timesteps(steps: int, timesteps: int) -> np.ndarray:
    """``steps`` evenly spaced, strictly decreasing indices from T-1 down to 0."""
    if steps > timesteps:
        raise ValueError(f"cannot take {steps} sampling steps on a {timesteps}-step schedule")
    if steps == 1:
        return np.array([timesteps - 1], dtype=np.int64)
    return np.round(np.linspace(timesteps - 1, 0, steps)).astype(np.int64)


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    if w == 1.0:
        return eps_cond
    if w == 0.0:
        return eps_uncond
    return eps_uncond + w * (eps_cond - eps_uncond)


def ddim_step(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    noise: Optional[np.ndarray] = None,
    clip: bool = True,
):
    """
    One DDIM update from ``t`` to ``t_prev`` (``t_prev = -1`` means the clean image).

    Returns ``(x_prev, x0_pred)`` where ``x0_pred`` is the unclipped estimate.
    """
    schedule.check(t)
    if t_prev > t:
        raise NumericError(f"DDIM step goes forward in time ({t} -> {t_prev})", site="ddim")
    if t_prev >= 0:
        schedule.check(t_prev)
    dtype = x_t.dtype
    abar_t = schedule.alpha_bars[t]
    abar_prev = schedule.alpha_bars[t_prev] if t_prev >= 0 else 1.0
    x0_pred = (x_t - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
    x0_used = np.clip(x0_pred, -1.0, 1.0) if clip else x0_pred
    sigma = 0.0
    if eta > 0 and t_prev >= 0:
        sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * np.sqrt(1.0 - abar_t / abar_prev)
    direction = np.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0)) * eps_hat
    x_prev = np.sqrt(abar_prev) * x0_used + direction
    if sigma > 0:
        if noise is None:
            raise ValueError("eta > 0 needs a noise sample")
        x_prev = x_prev + sigma * noise
    return x_prev.astype(dtype), x0_pred.astype(dtype)


def sample(
    denoiser: DenoiseFn,
    prompt: Optional[TextEmbedding],
    fusion: Optional[FusionFeature],
    lam: Lam,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    image_size: int = 32,
    rng: Optional[RngStream] = None,
) -> np.ndarray:
    """Generate one (H, W, 3) image in [-1, 1]."""
    rng = rng or RngStream(config.seed, Stream.SAMPLER)
    x = rng.normal((image_size, image_size, 3))
    steps = sampling_timesteps(config.steps, schedule.timesteps)
    with no_grad():
        for index, t in enumerate(steps):
            t_prev = int(steps[index + 1]) if index + 1 < len(steps) else -1
            try:
                cond = denoiser(DenoiserInput(x_t=x, t=t, prompt=prompt, fusion=fusion, lam=lam)).data
                if config.guidance_scale == 1.0:
                    eps = cond
                else:
                    uncond = denoiser(DenoiserInput(x_t=x, t=t)).data
                    eps = cfg_combine(uncond, cond, config.guidance_scale)
                noise = rng.normal(x.shape) if config.eta > 0 else None
                x, _ = ddim_step(x, eps, int(t), t_prev, schedule, eta=config.eta, noise=noise)
            except NumericError as e:
                raise NumericError(f"Sampling failed ({e.reason})", site=e.site, step=index) from e
    return np.clip(x, -1.0, 1.0)


def to_unit_range(x: np.ndarray) -> np.ndarray:
    """[-1, 1] model space -> [0, 1] image space."""
    return np.clip((x + 1.0) * 0.5, 0.0, 1.0).astype(np.float32)


def to_model_range(image: np.ndarray) -> np.ndarray:
    return np.asarray(image) * 2.0 - 1.0
