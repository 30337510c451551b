"""
Pipeline configuration.

Config files are flat ``key=value`` text read with decouple's RepositoryEnv;
pydantic does the typing and rejects unknown keys. Command-line flags are
applied on top of the file values.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from decouple import RepositoryEnv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from story.exceptions import ConfigError

logger = logging.getLogger(__name__)


class HistoryMode(str, Enum):
    SALIENT = "salient"
    ALL_MEAN = "all_mean"


class Conditioning(str, Enum):
    FULL = "full"
    IMAGE_ONLY = "image_only"
    TEXT_ONLY = "text_only"
    PROMPT_ONLY = "prompt_only"


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, validate_assignment=True)

    # encoders
    common_dim: int = Field(64, ge=1)
    max_len: int = Field(32, ge=3)
    patch: int = Field(4, ge=1)
    image_size: int = Field(32, ge=4)
    encoder_blocks: int = Field(2, ge=1)
    encoder_lr: float = Field(1e-3, ge=0.0)
    # fusion
    fusion_blocks: int = Field(4, ge=1)
    fusion_heads: int = Field(1, ge=1)
    # denoiser
    unet_channels: Tuple[int, int] = (32, 64)
    groups: int = Field(8, ge=1)
    time_dim: int = Field(64, ge=2)
    lambda_: float = Field(0.5, ge=0.0, alias="lambda")
    # diffusion
    timesteps: int = Field(1000, ge=2)
    beta_start: float = Field(1e-4, gt=0.0)
    beta_end: float = Field(0.02, lt=1.0)
    sampler_steps: int = Field(50, ge=1)
    guidance_scale: float = Field(5.0, ge=0.0)
    eta: float = Field(0.0, ge=0.0)
    # optimization
    lr: float = Field(1e-4, ge=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    batch_size: int = Field(16, ge=2)
    encoder_steps: int = Field(2000, ge=0)
    base_steps: int = Field(5000, ge=0)
    adapter_steps: int = Field(5000, ge=0)
    cfg_drop_prob: float = Field(0.1, ge=0.0, le=1.0)
    checkpoint_every: int = Field(1000, ge=0)
    # data and runs
    seed: int = Field(0, ge=0)
    stories: int = Field(2000, ge=1)
    test_stories: int = Field(200, ge=1)
    frames: int = Field(8, ge=2)
    caption_noise: bool = False
    history_mode: HistoryMode = HistoryMode.SALIENT
    conditioning: Conditioning = Conditioning.FULL

    @field_validator("unet_channels", mode="before")
    @classmethod
    def validate_unet_channels(cls, v):
        if isinstance(v, str):
            v = tuple(part.strip() for part in v.split(",") if part.strip())
        return v

    @model_validator(mode="after")
    def validate_shapes(self):
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} must be a multiple of patch {self.patch}")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4 for the two U-Net downsamplings")
        if self.common_dim % self.fusion_heads:
            raise ValueError(f"common_dim {self.common_dim} must split into {self.fusion_heads} heads")
        if any(c % self.groups for c in self.unet_channels):
            raise ValueError(f"unet_channels {self.unet_channels} must be multiples of groups {self.groups}")
        if self.beta_start >= self.beta_end:
            raise ValueError("beta_start must be below beta_end")
        if self.sampler_steps > self.timesteps:
            raise ValueError("sampler_steps cannot exceed timesteps")
        return self

    def resolved(self) -> Dict[str, Any]:
        """JSON-ready dump with file-format key names."""
        return self.model_dump(mode="json", by_alias=True)


def field_names() -> set:
    names = set(PipelineConfig.model_fields)
    return names | {field.alias for field in PipelineConfig.model_fields.values() if field.alias}


def _check_lines(path: Path):
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#") and "=" not in stripped:
            raise ConfigError(f"{path}:{number}: expected key=value, got '{stripped}'")


def build_config(values: Dict[str, Any]) -> PipelineConfig:
    unknown = sorted(set(values) - field_names())
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    try:
        return PipelineConfig.model_validate(values)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid config: {problems}")


def read_config_file(path) -> Dict[str, str]:
    """Raw string values of a key=value file; unknown keys are left for build_config."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    _check_lines(path)
    return dict(RepositoryEnv(str(path)).data)


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """File values (if any) with ``overrides`` applied on top; ``None`` overrides are ignored."""
    values: Dict[str, Any] = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    config = build_config(values)
    logger.debug(f"Resolved config: {config.resolved()}")
    return config
