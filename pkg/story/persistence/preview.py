"""PPM contact sheets: one row per story, reference row above when available."""

from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

GUTTER = 2
SCALE = 2
BACKDROP = (240, 240, 240)


def to_pil(image: np.ndarray, scale: int = SCALE) -> Image.Image:
    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    tile = Image.fromarray(pixels)
    if scale != 1:
        tile = tile.resize((tile.width * scale, tile.height * scale), Image.Resampling.NEAREST)
    return tile


def preview_grid(rows: Sequence[Sequence[np.ndarray]], scale: int = SCALE) -> Image.Image:
    tiles: List[List[Image.Image]] = [[to_pil(image, scale) for image in row] for row in rows if len(row)]
    if not tiles:
        raise ValueError("Preview grid needs at least one image")
    width, height = tiles[0][0].size
    columns = max(len(row) for row in tiles)
    sheet = Image.new(
        "RGB",
        (columns * width + (columns - 1) * GUTTER, len(tiles) * height + (len(tiles) - 1) * GUTTER),
        BACKDROP,
    )
    for r, row in enumerate(tiles):
        for c, tile in enumerate(row):
            sheet.paste(tile, (c * (width + GUTTER), r * (height + GUTTER)))
    return sheet


def save_preview(path, generated: Sequence[Sequence[np.ndarray]], references: Optional[Sequence] = None) -> Path:
    """Interleave reference and generated rows and write a binary PPM."""
    rows = []
    for index, frames in enumerate(generated):
        if references is not None and references[index] is not None:
            rows.append(references[index])
        rows.append(frames)
    path = Path(path)
    preview_grid(rows).save(path, format="PPM")
    return path
