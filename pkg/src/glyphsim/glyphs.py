"""Binary glyph raster type and PNG persistence.

Every image in the pipeline is a 105x105 binary raster (ink=1,
background=0) carrying its class, script and instance identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

CANVAS = 105
BINARIZE_THRESHOLD = 0.5


class GlyphError(ValueError):
    """Raised for malformed glyph rasters or unreadable image files."""


@dataclass
class GlyphImage:
    """A single binary glyph raster with identity metadata.

    pixels: uint8 array of shape (105, 105) with values in {0, 1}.
    class_id: global integer glyph-class identifier.
    script_id: writing-system name this glyph belongs to.
    instance_id: index of this instance within its class.
    source_instance_id / augmentation_index: provenance for augmented
        copies (None on originals).
    """

    pixels: np.ndarray
    class_id: int
    script_id: str
    instance_id: int
    source_instance_id: Optional[int] = None
    augmentation_index: Optional[int] = None
    char_name: str = ""

    def __post_init__(self) -> None:
        validate_pixels(self.pixels)

    @property
    def is_augmented(self) -> bool:
        return self.augmentation_index is not None

    def ink_count(self) -> int:
        return int(self.pixels.sum())


def validate_pixels(pixels: np.ndarray) -> None:
    """Check the raster invariants: 105x105, values in {0,1}, some ink."""
    if not isinstance(pixels, np.ndarray):
        raise GlyphError(f"pixels must be a numpy array, got {type(pixels)!r}")
    if pixels.shape != (CANVAS, CANVAS):
        raise GlyphError(f"glyph raster must be {CANVAS}x{CANVAS}, got {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise GlyphError(f"glyph raster must be uint8, got {pixels.dtype}")
    vals = np.unique(pixels)
    if not np.all(np.isin(vals, (0, 1))):
        raise GlyphError(f"glyph raster values must be in {{0,1}}, got {vals[:8]}")
    if pixels.sum() == 0:
        raise GlyphError("glyph raster has no ink pixels")


def binarize(gray: np.ndarray) -> np.ndarray:
    """Threshold a grayscale array (any numeric dtype) to a {0,1} uint8 raster.

    Input is normalized to [0,1] by its dtype range; ink is whatever lies
    on the dark side after inversion-agnostic normalization is NOT
    attempted: callers must pass ink-high arrays (ink bright = 1).
    """
    arr = np.asarray(gray)
    if arr.dtype == np.uint8:
        norm = arr.astype(np.float64) / 255.0
    elif arr.dtype == bool:
        norm = arr.astype(np.float64)
    else:
        norm = arr.astype(np.float64)
    return (norm > BINARIZE_THRESHOLD).astype(np.uint8)


def load_glyph_png(path: Path | str) -> np.ndarray:
    """Read a PNG as a binary raster.

    Omniglot stores ink as black on white; we map ink to 1 by inverting
    the grayscale before thresholding at 0.5.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except Exception as exc:  # Pillow raises a zoo of types for bad files
        raise GlyphError(f"unreadable image {path}: {exc}") from exc
    if gray.shape != (CANVAS, CANVAS):
        raise GlyphError(f"{path}: expected {CANVAS}x{CANVAS}, got {gray.shape}")
    return binarize(255 - gray)


def save_glyph_png(pixels: np.ndarray, path: Path | str) -> None:
    """Write a binary raster as an 8-bit grayscale PNG (ink=black)."""
    validate_pixels(pixels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(((1 - pixels) * 255).astype(np.uint8), mode="L")
    img.save(path, format="PNG")
