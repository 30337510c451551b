"""
Exception hierarchy for the storytelling pipeline.

Every error carries the process exit code the management commands report,
so a failure deep inside sampling surfaces with the same code as one raised
while parsing a config file.
"""

from typing import Optional


class VistaError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(VistaError):
    """Raised for unknown or ill-typed configuration and bad CLI usage."""

    exit_code = 2


class DataFormatError(VistaError):
    """Raised when a corpus, story file or checkpoint cannot be read."""

    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SequencingError(DataFormatError):
    """Raised when a story is asked for a frame it has not materialized."""


class NumericError(VistaError):
    """Raised when a value stops being finite or a shape contract breaks."""

    exit_code = 4

    def __init__(self, message: str, site: Optional[str] = None, step: Optional[int] = None):
        self.reason = message
        details = []
        if site:
            details.append(f"site={site}")
        if step is not None:
            details.append(f"step={step}")
        if details:
            message = f"{message} [{', '.join(details)}]"
        super().__init__(message)
        self.site = site
        self.step = step


class DimensionError(NumericError):
    """Shape mismatch between operands."""


class EmptyContextError(NumericError):
    """Attention was asked to attend over zero key positions."""


class FrozenViolationError(VistaError):
    """An optimizer tried to touch a tensor of the frozen base model."""

    exit_code = 5

    def __init__(self, tensor_name: str):
        super().__init__(f"Refusing to update frozen-base tensor '{tensor_name}'")
        self.tensor_name = tensor_name
