from story.denoiser.adapter import (
    AdapterWeights,
    Denoiser,
    DenoiserInput,
    base_cross_attention,
    denoise_forward,
    history_cross_attention,
    mix,
)
from story.denoiser.unet import SITE_NAMES, UNet, freeze_base

__all__ = [
    "SITE_NAMES",
    "AdapterWeights",
    "Denoiser",
    "DenoiserInput",
    "UNet",
    "base_cross_attention",
    "denoise_forward",
    "freeze_base",
    "history_cross_attention",
    "mix",
]
