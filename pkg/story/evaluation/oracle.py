"""
Deterministic visual answerer.

Pixels are labeled with the nearest named color. An object of a given color
is looked for in the 11x11 window around each grid cell; the best-covered
cell is its position, the window is matched against the eight rendered shape
prototypes, and the action is read from the background-colored "eye" pixel
next to the cell center. Multiple-choice ties resolve to the lowest option
index, and questions about an object that cannot be found resolve to index 0.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Protocol

import numpy as np

from story.data.render import EYE_OFFSETS, shape_mask
from story.data.scene import BACKGROUND_COLORS, OBJECT_COLORS, POSITIONS, SHAPES, SIZE_RADIUS, cell_center
from story.evaluation.questions import QAItem, verb_phrase

logger = logging.getLogger(__name__)

PALETTE_NAMES = list(OBJECT_COLORS) + list(BACKGROUND_COLORS)
PALETTE = np.array([*OBJECT_COLORS.values(), *BACKGROUND_COLORS.values()], dtype=np.float64)
WINDOW_RADIUS = max(SIZE_RADIUS.values())
MIN_PIXELS = 6


class Answerer(Protocol):
    def answer(self, image: np.ndarray, item: QAItem) -> int:
        ...


def label_pixels(image: np.ndarray) -> np.ndarray:
    """(H, W) index into PALETTE_NAMES of each pixel's nearest named color."""
    pixels = np.asarray(image, dtype=np.float64)
    distances = ((pixels[..., None, :] - PALETTE) ** 2).sum(axis=-1)
    return distances.argmin(axis=-1)


def _window(array: np.ndarray, position: str) -> np.ndarray:
    cy, cx = cell_center(position)
    r = WINDOW_RADIUS
    padded = np.pad(array, ((r, r), (r, r)), constant_values=False)
    return padded[cy:cy + 2 * r + 1, cx:cx + 2 * r + 1]


@lru_cache(maxsize=None)
def prototype(shape: str, size: str) -> np.ndarray:
    radius = SIZE_RADIUS[size]
    out = np.zeros((2 * WINDOW_RADIUS + 1,) * 2, dtype=bool)
    offset = WINDOW_RADIUS - radius
    out[offset:offset + 2 * radius + 1, offset:offset + 2 * radius + 1] = shape_mask(shape, radius)
    out.setflags(write=False)
    return out


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


@dataclass
class Entity:
    color: str
    position: str
    cell_counts: Dict[str, int]
    window: np.ndarray

    def shape_scores(self) -> Dict[str, float]:
        """Best IoU per shape over both sizes."""
        return {
            shape: max(_iou(self.window, prototype(shape, size)) for size in SIZE_RADIUS) for shape in SHAPES
        }

    def best_shape(self) -> str:
        scores = self.shape_scores()
        return max(SHAPES, key=lambda shape: (scores[shape], -SHAPES.index(shape)))


class ImageReading:
    """Cached per-image analysis shared by all questions about one frame."""

    def __init__(self, image: np.ndarray):
        self.image = np.asarray(image, dtype=np.float64)
        self.labels = label_pixels(self.image)
        self._entities: Dict[str, Optional[Entity]] = {}

    def color_count(self, name: str) -> int:
        return int((self.labels == PALETTE_NAMES.index(name)).sum())

    def entity(self, color: str) -> Optional[Entity]:
        if color not in self._entities:
            self._entities[color] = self._find(color)
        return self._entities[color]

    def _find(self, color: str) -> Optional[Entity]:
        hits = self.labels == PALETTE_NAMES.index(color)
        counts = {position: int(_window(hits, position).sum()) for position in POSITIONS}
        best = max(POSITIONS, key=lambda p: (counts[p], -POSITIONS.index(p)))
        if counts[best] < MIN_PIXELS:
            return None
        return Entity(color=color, position=best, cell_counts=counts, window=_window(hits, best))

    def shape_at(self, color: str, position: str, shape: str) -> float:
        """How well the ``color`` object found at ``position`` matches ``shape``; 0 when it is elsewhere."""
        entity = self.entity(color)
        if entity is None or entity.position != position:
            return 0.0
        return entity.shape_scores()[shape]

    def eye_scores(self, entity: Entity) -> Dict[str, float]:
        """Per verb: how unlike the object color the pixel at its eye offset is."""
        cy, cx = cell_center(entity.position)
        reference = np.array(OBJECT_COLORS[entity.color])
        size = self.image.shape[0]
        scores = {}
        for verb, (dy, dx) in EYE_OFFSETS.items():
            y, x = cy + dy, cx + dx
            if 0 <= y < size and 0 <= x < size:
                scores[verb_phrase(verb)] = float(((self.image[y, x] - reference) ** 2).sum())
            else:
                scores[verb_phrase(verb)] = 0.0
        return scores


def _pick(choices, scores: Dict[str, float]) -> int:
    values = [scores.get(choice, float("-inf")) for choice in choices]
    return int(np.argmax(values))


def answer_with_reading(reading: ImageReading, item: QAItem) -> int:
    fact = item.source_fact
    if item.kind == "yes-no":
        entity = reading.entity(item.color)
        present = entity is not None and (item.shape is None or entity.best_shape() == item.shape)
        return 0 if present else 1
    if fact == "background":
        return _pick(item.choices, {name: reading.color_count(name) for name in item.choices})
    if fact == "color":
        return _pick(item.choices, {name: reading.shape_at(name, item.position, item.shape) for name in item.choices})
    entity = reading.entity(item.color)
    if entity is None:
        return 0
    if fact == "shape":
        return _pick(item.choices, entity.shape_scores())
    if fact == "position":
        return _pick(item.choices, entity.cell_counts)
    if fact == "verb":
        return _pick(item.choices, reading.eye_scores(entity))
    logger.warning(f"Oracle has no rule for '{fact}' questions, answering 0")
    return 0


def answer_question_oracle(image: np.ndarray, item: QAItem) -> int:
    return answer_with_reading(ImageReading(image), item)


class OracleAnswerer:
    def answer(self, image: np.ndarray, item: QAItem) -> int:
        return answer_question_oracle(image, item)
