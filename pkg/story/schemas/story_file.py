"""Story files: prompts plus the real first frame to continue from."""

import json
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from story.data.corpus import IMAGE_DTYPE, IMAGE_SHAPE, load_corpus
from story.exceptions import DataFormatError


class StoryEntry(BaseModel):
    """
    One story to continue.

    The first frame comes either from a corpus story (``reference_corpus`` +
    ``reference_story``) or from a raw little-endian float32 32x32x3 file
    (``reference_image``), resolved relative to the story file.
    """

    model_config = ConfigDict(extra="forbid")

    story_id: int = Field(0, ge=0)
    prompts: List[str]
    reference_corpus: Optional[str] = None
    reference_story: Optional[int] = None
    reference_image: Optional[str] = None

    @field_validator("prompts")
    @classmethod
    def validate_prompts(cls, v):
        if len(v) < 2:
            raise ValueError("A story needs at least 2 prompts")
        return v

    @model_validator(mode="after")
    def validate_reference(self):
        from_corpus = self.reference_corpus is not None
        if from_corpus == (self.reference_image is not None):
            raise ValueError("Give exactly one of reference_corpus or reference_image")
        if from_corpus and self.reference_story is None:
            raise ValueError("reference_corpus needs reference_story")
        return self


class StoryFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stories: List[StoryEntry]

    @field_validator("stories")
    @classmethod
    def validate_stories(cls, v):
        if not v:
            raise ValueError("Story file lists no stories")
        ids = [entry.story_id for entry in v]
        if len(set(ids)) != len(ids):
            raise ValueError("Story ids must be unique")
        return v


def load_story_file(path) -> StoryFile:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"Story file not found: {path}")
    try:
        return StoryFile.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"Story file {path} is not JSON: {e.msg}", offset=e.pos)
    except ValidationError as e:
        raise DataFormatError(f"Invalid story file {path}: {e.errors()[0]['msg']}")


def read_raw_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    expected = IMAGE_DTYPE.itemsize * int(np.prod(IMAGE_SHAPE))
    if len(raw) != expected:
        raise DataFormatError(f"Raw image {path} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=IMAGE_DTYPE).reshape(IMAGE_SHAPE).astype(np.float32)


def reference_image(entry: StoryEntry, base_dir: Path) -> np.ndarray:
    """The real first frame of ``entry``; a missing one is a data error."""
    if entry.reference_image is not None:
        path = base_dir / entry.reference_image
        if not path.is_file():
            raise DataFormatError(f"Story {entry.story_id}: first frame file {path} is missing")
        return read_raw_image(path)
    corpus = {record.story_id: record for record in load_corpus(base_dir / entry.reference_corpus)}
    record = corpus.get(entry.reference_story)
    if record is None or not record.frames:
        raise DataFormatError(f"Story {entry.story_id}: corpus has no story {entry.reference_story} to start from")
    return record.frames[0].image
