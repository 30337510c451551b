"""
Deterministic rasterizer for scene graphs.

All geometry is integer lattice tests on pixel offsets from a grid-cell
center, so a render is bit-identical on every platform.
"""

import math
from functools import lru_cache
from typing import Tuple

import numpy as np

from story.data.scene import (
    BACKGROUND_COLORS,
    OBJECT_COLORS,
    SIZE_RADIUS,
    ObjectSpec,
    SceneGraph,
    cell_center,
)

IMAGE_SIZE = 32

# (dy, dx) of the background-colored "eye" pixel that encodes the verb.
EYE_OFFSETS = {
    "sits": (1, 0),
    "jumps": (-1, 0),
    "moves-left": (0, -1),
    "moves-right": (0, 1),
}


@lru_cache(maxsize=None)
def shape_mask(shape: str, radius: int) -> np.ndarray:
    """Boolean (2r+1, 2r+1) footprint of a shape centered in the window."""
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    ady, adx = np.abs(dy), np.abs(dx)
    if shape == "circle":
        mask = dx * dx + dy * dy <= radius * radius
    elif shape == "square":
        mask = np.ones_like(dx, dtype=bool)
    elif shape == "triangle":
        # apex up, base on the bottom row
        mask = 2 * adx <= dy + radius
    elif shape == "star":
        # four-pointed: a 3-pixel-wide cross tapering to 1-pixel tips
        arms = ((adx <= 1) & (ady <= radius - 1)) | ((ady <= 1) & (adx <= radius - 1))
        tips = ((adx == 0) & (ady == radius)) | ((ady == 0) & (adx == radius))
        mask = arms | tips
    else:
        raise ValueError(f"Unknown shape '{shape}'")
    mask.setflags(write=False)
    return mask


def shape_area(shape: str, radius: int) -> float:
    """Closed-form area of the continuous shape the rasterizer approximates."""
    side = 2 * radius + 1
    if shape == "circle":
        return math.pi * radius * radius
    if shape == "square":
        return float(side * side)
    if shape == "triangle":
        return side * side / 2.0
    if shape == "star":
        return 6.0 * (2 * radius - 1) - 5.0
    raise ValueError(f"Unknown shape '{shape}'")


def _stamp(image: np.ndarray, spec: ObjectSpec, center: Tuple[int, int]):
    radius = SIZE_RADIUS[spec.size]
    mask = shape_mask(spec.shape, radius)
    cy, cx = center
    size = image.shape[0]
    y0, x0 = cy - radius, cx - radius
    ys = slice(max(y0, 0), min(y0 + mask.shape[0], size))
    xs = slice(max(x0, 0), min(x0 + mask.shape[1], size))
    window = mask[ys.start - y0:ys.stop - y0, xs.start - x0:xs.stop - x0]
    image[ys, xs][window] = OBJECT_COLORS[spec.color]


def render_scene(graph: SceneGraph) -> np.ndarray:
    """Rasterize ``graph`` into a 32x32x3 float32 image with values in [0, 1]."""
    background = BACKGROUND_COLORS[graph.background]
    image = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    image[:] = background
    if graph.companion is not None:
        _stamp(image, graph.companion, cell_center(graph.companion_position))
    if graph.protagonist is not None:
        cy, cx = cell_center(graph.position)
        _stamp(image, graph.protagonist, (cy, cx))
        dy, dx = EYE_OFFSETS[graph.verb]
        image[cy + dy, cx + dx] = background
    return image
