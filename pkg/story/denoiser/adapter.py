"""
History adapter and the full denoiser forward pass.

Every base cross-attention site gets an adapter twin that reuses the site's
query projection and adds its own key/value projections over the fusion
feature. The two attention outputs are mixed as ``Z + lam * Zc`` before the
site's output projection. With ``lam == 0`` or no fusion feature the adapter
branch is not evaluated at all, so the result is bit-identical to the base
model.
"""

import contextlib
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

from story.denoiser.unet import SITE_NAMES, CrossAttentionSite, UNet
from story.encoders.model import TextEmbedding
from story.exceptions import DimensionError, EmptyContextError, NumericError
from story.fusion.model import FusionFeature
from story.numerics import ops
from story.numerics.nn import Linear, Module, Parameter, Role
from story.numerics.rng import RngStream
from story.numerics.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

Lam = Union[float, np.ndarray]


class AdapterSite(Module):
    def __init__(self, rng: RngStream, site: CrossAttentionSite, context_dim: int):
        role = Role.TRAINABLE_ADAPTER
        self.key = Linear(rng, context_dim, site.channels, role, bias=False)
        self.value = Linear(rng, context_dim, site.channels, role, bias=False)


class AdapterWeights(Module):
    """One K/V projection pair per base cross-attention site."""

    def __init__(self, rng: RngStream, unet: UNet, copy_base: bool = True):
        self.sites: Dict[str, AdapterSite] = {}
        for name in SITE_NAMES:
            site = unet.sites[name]
            adapter_site = AdapterSite(rng, site, unet.context_dim)
            if copy_base:
                # start from the text projections so the adapter begins in a
                # sensible subspace of the base attention
                adapter_site.key.weight.assign(site.key.weight.data)
                adapter_site.value.weight.assign(site.value.weight.data)
            self.sites[name] = adapter_site


@dataclass
class DenoiserInput:
    """Noisy images, timesteps and conditioning for one denoiser call."""

    x_t: np.ndarray
    t: np.ndarray
    prompt: Optional[TextEmbedding] = None
    fusion: Optional[FusionFeature] = None
    lam: Lam = 0.0

    def __post_init__(self):
        self.t = np.atleast_1d(np.asarray(self.t, dtype=np.int64))
        if not np.all(np.isfinite(np.asarray(self.lam, dtype=np.float64))):
            raise NumericError("mixing scale lambda is not finite", site="adapter")
        if np.any(np.asarray(self.lam) < 0):
            raise ValueError("mixing scale lambda must be >= 0")

    @property
    def adapter_active(self) -> bool:
        return self.fusion is not None and bool(np.any(np.asarray(self.lam) != 0))


def base_cross_attention(site: CrossAttentionSite, latent: Tensor, keys: Tensor, key_mask: np.ndarray) -> Tensor:
    """Z = Attention(latent W_q, c W_k, c W_v) over the visible prompt keys."""
    z, _ = ops.scaled_dot_attention(site.query(latent), site.key(keys), site.value(keys), key_mask=key_mask)
    return z


def history_cross_attention(
    site: CrossAttentionSite,
    latent: Tensor,
    fusion: Optional[FusionFeature],
    adapter: AdapterSite,
) -> Tensor:
    """Zc = Attention(latent W_q, cF W'_k, cF W'_v); zeros when there is no fusion feature."""
    if fusion is None:
        batch, length = latent.shape[:2]
        return Tensor(np.zeros((batch, length, site.channels), dtype=latent.dtype))
    features = fusion.features
    mask = fusion.mask
    if features.ndim == 2:
        features = features.reshape(1, *features.shape)
        mask = mask[None, :]
    if not mask.any(axis=-1).all():
        raise EmptyContextError("fusion feature has no visible rows", site=site.name)
    zc, _ = ops.scaled_dot_attention(
        site.query(latent), adapter.key(features), adapter.value(features), key_mask=mask
    )
    return zc


def mix(z: Tensor, zc: Tensor, lam: Lam) -> Tensor:
    """Z' = Z + lam * Zc; ``lam`` may be a scalar or one value per batch row."""
    if z.shape != zc.shape:
        raise DimensionError(f"cannot mix attention outputs {z.shape} and {zc.shape}")
    lam = np.asarray(lam, dtype=z.dtype)
    if lam.ndim == 0:
        if lam == 0:
            return z
        return z + zc * lam
    return z + zc * lam.reshape(-1, *([1] * (z.ndim - 1)))


@contextlib.contextmanager
def _site(name: str):
    """Attach the U-Net location to non-finite failures raised inside the block."""
    try:
        yield
    except NumericError as e:
        if type(e) is not NumericError or e.site in SITE_NAMES:
            raise
        raise NumericError(f"Non-finite activation ({e.reason})", site=name, step=e.step) from e


class Denoiser:
    """Frozen or trainable U-Net plus an optional history adapter."""

    def __init__(self, unet: UNet, adapter: Optional[AdapterWeights] = None):
        self.unet = unet
        self.adapter = adapter

    def __call__(self, inp: DenoiserInput) -> Tensor:
        return denoise_forward(inp, self.unet, self.adapter)


def denoise_forward(inp: DenoiserInput, base: UNet, adapter: Optional[AdapterWeights] = None) -> Tensor:
    """Predict the noise in ``inp.x_t``; output has the input's shape."""
    x = inp.x_t
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != (base.image_size, base.image_size, 3):
        raise DimensionError(f"expected {base.image_size}x{base.image_size}x3 inputs, got {x.shape[1:]}")
    batch = x.shape[0]
    t = inp.t if inp.t.shape[0] == batch else np.broadcast_to(inp.t, (batch,))

    prompt_tokens = inp.prompt.tokens if inp.prompt is not None else None
    prompt_mask = inp.prompt.mask if inp.prompt is not None else None
    keys, key_mask = base.prompt_context(prompt_tokens, prompt_mask, batch)
    use_adapter = adapter is not None and inp.adapter_active

    def attend(name: str, h: Tensor) -> Tensor:
        site = base.sites[name]
        with _site(name):
            _, height, width, channels = h.shape
            latent = site.latent(h)
            z = base_cross_attention(site, latent, keys, key_mask)
            if use_adapter:
                zc = history_cross_attention(site, latent, inp.fusion, adapter.sites[name])
                z = mix(z, zc, inp.lam)
            return h + site.out(z).reshape(batch, height, width, channels)

    with _site("time"):
        temb = base.time_features(t)
    with _site("down1"):
        h = base.stem(as_tensor(x, like=base.null_token))
        h = base.down1(h, temb)
    skip1 = h = attend("down1.attn", h)
    with _site("down2"):
        h = base.down2(base.down1_pool(h), temb)
    skip2 = h = attend("down2.attn", h)
    with _site("mid"):
        h = base.mid1(base.down2_pool(h), temb)
    h = attend("mid.attn", h)
    with _site("mid"):
        h = base.mid2(h, temb)
    with _site("up2"):
        h = base.up2(ops.concat([ops.upsample_nearest2x(h), skip2], axis=-1), temb)
    h = attend("up2.attn", h)
    with _site("up1"):
        h = base.up1(ops.concat([ops.upsample_nearest2x(h), skip1], axis=-1), temb)
    h = attend("up1.attn", h)
    with _site("out"):
        eps = base.out_conv(ops.silu(base.out_norm(h)))
    return eps.reshape(*eps.shape[1:]) if single else eps


def trainable_ratio(adapter: AdapterWeights, fusion: Module, unet: UNet) -> float:
    """Adapter plus fusion parameter count as a fraction of the base count."""
    return (adapter.num_parameters() + fusion.num_parameters()) / max(1, unet.num_parameters())


def adapter_parameters(adapter: AdapterWeights, fusion: Module):
    """Named trainable parameters of stage 2, prefixed the way checkpoints store them."""
    named = [(f"adapter.{name}", p) for name, p in adapter.named_parameters()]
    named += [(f"fusion.{name}", p) for name, p in fusion.named_parameters()]
    for name, param in named:
        if not isinstance(param, Parameter) or param.role not in (Role.TRAINABLE_ADAPTER, Role.TRAINABLE_FUSION):
            raise ValueError(f"{name} is not an adapter or fusion parameter")
    return named
