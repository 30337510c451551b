"""Model field validators for run registry records."""

import re

from django.core.exceptions import ValidationError

_SHA256 = re.compile(r"^[0-9a-f]{64}$")


def validate_sha256(value: str) -> str:
    """
    Validate a lowercase hex sha256 digest.

    Raises:
        ValidationError: If value is not 64 lowercase hex characters
    """
    if not value or not _SHA256.match(value):
        raise ValidationError(f"'{value}' is not a sha256 hex digest")
    return value
