"""
Text-conditioned U-Net noise predictor in pixel space.

Layout for the default (32, 64) channel widths on 32x32 inputs:

    stem conv 3->32
    down1  res 32->32, cross-attn          @32x32, stride-2 conv
    down2  res 32->64, cross-attn          @16x16, stride-2 conv
    mid    res, cross-attn, res            @8x8
    up2    upsample, concat skip, res 128->64, cross-attn   @16x16
    up1    upsample, concat skip, res  96->32, cross-attn   @32x32
    out    group norm, SiLU, conv 32->3

Every cross-attention site reads the prompt tokens plus a learned null token.
The null token is only visible when the prompt has no visible tokens, which
is both the all-PAD fallback and the unconditional guidance branch.
"""

import logging
import math
from typing import Dict, Optional, Tuple

import numpy as np

from story.exceptions import DimensionError
from story.numerics import ops
from story.numerics.nn import Linear, Module, Parameter, Role, init_param
from story.numerics.rng import RngStream
from story.numerics.tensor import Tensor, default_dtype

logger = logging.getLogger(__name__)

SITE_NAMES = ("down1.attn", "down2.attn", "mid.attn", "up2.attn", "up1.attn")


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features [sin | cos] of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(default_dtype())


class Conv2d(Module):
    def __init__(self, rng: RngStream, c_in: int, c_out: int, role: Role, stride: int = 1):
        self.stride = stride
        self.weight = init_param(rng, (9 * c_in, c_out), role)
        self.bias = init_param(rng, (c_out,), role, fill=0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, kernel=3, stride=self.stride, padding=1)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, role: Role):
        self.groups = groups
        self.gain = Parameter(np.ones(channels, dtype=default_dtype()), role)
        self.bias = Parameter(np.zeros(channels, dtype=default_dtype()), role)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.gain, self.bias)


class ResBlock(Module):
    def __init__(self, rng: RngStream, c_in: int, c_out: int, time_dim: int, groups: int, role: Role):
        self.norm1 = GroupNorm(c_in, groups, role)
        self.conv1 = Conv2d(rng, c_in, c_out, role)
        self.time_proj = Linear(rng, time_dim, c_out, role)
        self.norm2 = GroupNorm(c_out, groups, role)
        self.conv2 = Conv2d(rng, c_out, c_out, role)
        self.skip = Linear(rng, c_in, c_out, role) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        batch, channels = temb.shape[0], h.shape[-1]
        h = h + self.time_proj(ops.silu(temb)).reshape(batch, 1, 1, channels)
        h = self.conv2(ops.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class CrossAttentionSite(Module):
    """Query from image features, keys and values from prompt tokens."""

    def __init__(self, rng: RngStream, name: str, channels: int, context_dim: int, groups: int, role: Role):
        self.name = name
        self.channels = channels
        self.norm = GroupNorm(channels, groups, role)
        self.query = Linear(rng, channels, channels, role, bias=False)
        self.key = Linear(rng, context_dim, channels, role, bias=False)
        self.value = Linear(rng, context_dim, channels, role, bias=False)
        self.out = Linear(rng, channels, channels, role)

    def latent(self, x: Tensor) -> Tensor:
        batch, height, width, channels = x.shape
        return self.norm(x).reshape(batch, height * width, channels)


class UNet(Module):
    def __init__(
        self,
        rng: RngStream,
        context_dim: int = 64,
        channels: Tuple[int, int] = (32, 64),
        time_dim: int = 64,
        groups: int = 8,
        image_size: int = 32,
    ):
        role = Role.BASE
        c0, c1 = channels
        temb_dim = 4 * time_dim
        if image_size % 4:
            raise DimensionError(f"image size {image_size} must be divisible by 4")
        self.image_size = image_size
        self.time_dim = time_dim
        self.context_dim = context_dim
        self.time_in = Linear(rng, time_dim, temb_dim, role)
        self.time_out = Linear(rng, temb_dim, temb_dim, role)
        self.null_token = init_param(rng, (1, context_dim), role, std=1.0)
        self.stem = Conv2d(rng, 3, c0, role)
        self.down1 = ResBlock(rng, c0, c0, temb_dim, groups, role)
        self.down1_pool = Conv2d(rng, c0, c0, role, stride=2)
        self.down2 = ResBlock(rng, c0, c1, temb_dim, groups, role)
        self.down2_pool = Conv2d(rng, c1, c1, role, stride=2)
        self.mid1 = ResBlock(rng, c1, c1, temb_dim, groups, role)
        self.mid2 = ResBlock(rng, c1, c1, temb_dim, groups, role)
        self.up2 = ResBlock(rng, 2 * c1, c1, temb_dim, groups, role)
        self.up1 = ResBlock(rng, c1 + c0, c0, temb_dim, groups, role)
        self.out_norm = GroupNorm(c0, groups, role)
        self.out_conv = Conv2d(rng, c0, 3, role)
        widths = {"down1.attn": c0, "down2.attn": c1, "mid.attn": c1, "up2.attn": c1, "up1.attn": c0}
        self.sites: Dict[str, CrossAttentionSite] = {
            name: CrossAttentionSite(rng, name, widths[name], context_dim, groups, role) for name in SITE_NAMES
        }

    def time_features(self, t: np.ndarray) -> Tensor:
        features = Tensor(timestep_embedding(t, self.time_dim))
        return self.time_out(ops.silu(self.time_in(features)))

    def prompt_context(self, tokens: Optional[Tensor], mask: Optional[np.ndarray], batch: int) -> Tuple[Tensor, np.ndarray]:
        """Keys for the base sites: [null ; prompt tokens] with the null row visible only for empty prompts."""
        null = self.null_token.reshape(1, 1, self.context_dim) * np.ones((batch, 1, 1), dtype=self.null_token.dtype)
        if tokens is None:
            return null, np.ones((batch, 1), dtype=bool)
        if tokens.ndim == 2:
            tokens = tokens.reshape(1, *tokens.shape) * np.ones((batch, 1, 1), dtype=tokens.dtype)
            mask = np.broadcast_to(mask, (batch, mask.shape[-1]))
        mask = np.asarray(mask, dtype=bool)
        null_visible = ~mask.any(axis=-1, keepdims=True)
        return ops.concat([null, tokens], axis=1), np.concatenate([null_visible, mask], axis=-1)


def freeze_base(unet: UNet) -> int:
    """Retag every base weight as frozen; returns the frozen parameter count."""
    unet.set_role(Role.FROZEN_BASE)
    count = unet.num_parameters()
    logger.info(f"Froze {count} base denoiser parameters")
    return count
