"""
Scene graphs: the symbolic ground truth of every synthetic frame.

The attribute space is deliberately small and closed so that captions can be
parsed back into graphs and every question about a frame has an exact answer.
"""

from typing import Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

SHAPES = ("circle", "square", "triangle", "star")
SIZES = ("small", "large")
VERBS = ("sits", "moves-left", "moves-right", "jumps")

# Object and background palettes are disjoint so an object can never vanish
# into the background.
OBJECT_COLORS: Dict[str, Tuple[float, float, float]] = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.60, 0.20, 0.75),
    "orange": (1.00, 0.55, 0.00),
    "pink": (1.00, 0.60, 0.80),
    "brown": (0.50, 0.30, 0.10),
}
BACKGROUND_COLORS: Dict[str, Tuple[float, float, float]] = {
    "white": (1.00, 1.00, 1.00),
    "black": (0.00, 0.00, 0.00),
    "gray": (0.50, 0.50, 0.50),
    "beige": (0.90, 0.85, 0.65),
    "teal": (0.00, 0.45, 0.45),
    "navy": (0.05, 0.05, 0.35),
}

POSITIONS = (
    "top left", "top middle", "top right",
    "middle left", "center", "middle right",
    "bottom left", "bottom middle", "bottom right",
)
CENTER = "center"

# Pixel coordinate of each grid row/column center on a 32x32 canvas.
CELL_CENTERS = (5, 16, 26)
SIZE_RADIUS = {"small": 3, "large": 5}


def cell_center(position: str) -> Tuple[int, int]:
    index = POSITIONS.index(position)
    return CELL_CENTERS[index // 3], CELL_CENTERS[index % 3]


class ObjectSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    shape: str
    color: str
    size: str

    @field_validator("shape")
    @classmethod
    def validate_shape(cls, v):
        if v not in SHAPES:
            raise ValueError(f'Shape must be one of: {", ".join(SHAPES)}')
        return v

    @field_validator("color")
    @classmethod
    def validate_color(cls, v):
        if v not in OBJECT_COLORS:
            raise ValueError(f'Object color must be one of: {", ".join(OBJECT_COLORS)}')
        return v

    @field_validator("size")
    @classmethod
    def validate_size(cls, v):
        if v not in SIZES:
            raise ValueError(f'Size must be one of: {", ".join(SIZES)}')
        return v


class SceneGraph(BaseModel):
    """Protagonist, background, action and an optional companion."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    protagonist: Optional[ObjectSpec] = None
    background: str
    position: str = CENTER
    verb: str = "sits"
    companion: Optional[ObjectSpec] = None
    companion_position: Optional[str] = None

    @field_validator("background")
    @classmethod
    def validate_background(cls, v):
        if v not in BACKGROUND_COLORS:
            raise ValueError(f'Background must be one of: {", ".join(BACKGROUND_COLORS)}')
        return v

    @field_validator("position", "companion_position")
    @classmethod
    def validate_position(cls, v):
        if v is not None and v not in POSITIONS:
            raise ValueError(f"Unknown grid position '{v}'")
        return v

    @field_validator("verb")
    @classmethod
    def validate_verb(cls, v):
        if v not in VERBS:
            raise ValueError(f'Verb must be one of: {", ".join(VERBS)}')
        return v

    @model_validator(mode="after")
    def validate_companion(self):
        if self.companion is None:
            if self.companion_position is not None:
                raise ValueError("companion_position given without a companion")
            return self
        if self.protagonist is None:
            raise ValueError("a companion needs a protagonist")
        if self.companion_position is None:
            raise ValueError("companion needs a position")
        if self.companion_position == self.position:
            raise ValueError("companion cannot share the protagonist's cell")
        if self.companion.color == self.protagonist.color:
            raise ValueError("companion cannot share the protagonist's color")
        return self

    def canonical(self) -> str:
        """Stable text form used on disk."""
        return self.model_dump_json()

    @classmethod
    def from_canonical(cls, text: str) -> "SceneGraph":
        return cls.model_validate_json(text)


def sample_protagonist(rng) -> ObjectSpec:
    return ObjectSpec(shape=rng.choice(SHAPES), color=rng.choice(tuple(OBJECT_COLORS)), size=rng.choice(SIZES))


def sample_frame(rng, protagonist: ObjectSpec, companion_prob: float = 0.5) -> SceneGraph:
    """One frame of a story: the protagonist is fixed, everything else varies."""
    position = rng.choice(POSITIONS)
    companion = None
    companion_position = None
    if rng.random() < companion_prob:
        companion = ObjectSpec(
            shape=rng.choice(SHAPES),
            color=rng.choice(tuple(OBJECT_COLORS), exclude=(protagonist.color,)),
            size=rng.choice(SIZES),
        )
        companion_position = rng.choice(POSITIONS, exclude=(position,))
    return SceneGraph(
        protagonist=protagonist,
        background=rng.choice(tuple(BACKGROUND_COLORS)),
        position=position,
        verb=rng.choice(VERBS),
        companion=companion,
        companion_position=companion_position,
    )
