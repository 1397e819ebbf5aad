"""Stochastic affine augmentation of binary glyph rasters.

Each of {rotation, shear, zoom, translation} is applied independently
with a fixed probability, the drawn parameters are composed into one
affine map (rotation -> shear -> zoom -> translation, about the image
center), and the output is resampled with nearest-neighbor lookup so the
raster stays binary. Background fills with 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .glyphs import CANVAS, GlyphImage
from .util import rng_for

logger = logging.getLogger(__name__)

_MAX_RETRIES = 5


@dataclass
class AugmentationParams:
    """Ranges for the four affine perturbations.

    rotation_range: degrees, rotation about the canvas center.
    shear_range: x-by-y shear coefficient.
    zoom_range: isotropic scale factor.
    translation_range: pixel shift for both axes.
    per_transform_probability: chance each perturbation is applied.
    augmentations_per_instance: copies generated per original glyph.
    """

    rotation_range: tuple[float, float] = (-10.0, 10.0)
    shear_range: tuple[float, float] = (-0.3, 0.3)
    zoom_range: tuple[float, float] = (0.8, 1.2)
    translation_range: tuple[float, float] = (-2.0, 2.0)
    per_transform_probability: float = 0.5
    augmentations_per_instance: int = 8

    def __post_init__(self) -> None:
        if not 0.0 <= self.per_transform_probability <= 1.0:
            raise ValueError(
                f"per_transform_probability must be in [0,1], got "
                f"{self.per_transform_probability}"
            )
        if self.augmentations_per_instance < 0:
            raise ValueError("augmentations_per_instance must be >= 0")
        for name in ("rotation_range", "shear_range", "zoom_range", "translation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} has lo > hi: ({lo}, {hi})")


def draw_affine(params: AugmentationParams, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one random affine map; returns (A, t).

    A is the composed 2x2 linear part (zoom @ shear @ rotation) acting on
    centered (x, y) coordinates, t the pixel translation. Draws happen in
    the fixed order rotation, shear, zoom, translation so a seeded rng
    reproduces the same map.
    """
    p = params.per_transform_probability

    angle = 0.0
    if rng.random() < p:
        angle = rng.uniform(*params.rotation_range)
    shear = 0.0
    if rng.random() < p:
        shear = rng.uniform(*params.shear_range)
    zoom = 1.0
    if rng.random() < p:
        zoom = rng.uniform(*params.zoom_range)
    t = np.zeros(2)
    if rng.random() < p:
        t[0] = rng.uniform(*params.translation_range)
        t[1] = rng.uniform(*params.translation_range)

    theta = np.deg2rad(angle)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shr = np.array([[1.0, shear], [0.0, 1.0]])
    zm = np.array([[zoom, 0.0], [0.0, zoom]])
    return zm @ shr @ rot, t


def warp_affine(pixels: np.ndarray, linear: np.ndarray, translation: Sequence[float]) -> np.ndarray:
    """Apply an affine map about the canvas center with nearest-neighbor pull.

    Output pixel at centered coords q comes from input coords
    A^-1 (q - t); out-of-bounds samples fill with 0. Rounding is
    floor(x + 0.5) so an independent per-pixel evaluation matches exactly.
    """
    h, w = pixels.shape
    c = (w - 1) / 2.0
    inv = np.linalg.inv(linear)
    ys, xs = np.mgrid[0:h, 0:w]
    u = xs - c - translation[0]
    v = ys - c - translation[1]
    src_x = np.floor(inv[0, 0] * u + inv[0, 1] * v + c + 0.5).astype(np.int64)
    src_y = np.floor(inv[1, 0] * u + inv[1, 1] * v + c + 0.5).astype(np.int64)
    inside = (src_x >= 0) & (src_x < w) & (src_y >= 0) & (src_y < h)
    out = np.zeros_like(pixels)
    out[inside] = pixels[src_y[inside], src_x[inside]]
    return out


def apply_affine_augmentation(
    img: GlyphImage, params: AugmentationParams, rng: np.random.Generator
) -> GlyphImage:
    """Randomly perturb one glyph; retries empty outputs, then gives up.

    If five consecutive draws wipe out all ink the original raster is
    returned unchanged and a warning is logged.
    """
    for _ in range(_MAX_RETRIES):
        linear, t = draw_affine(params, rng)
        warped = warp_affine(img.pixels, linear, t)
        if warped.sum() > 0:
            return GlyphImage(
                pixels=warped,
                class_id=img.class_id,
                script_id=img.script_id,
                instance_id=img.instance_id,
                source_instance_id=img.instance_id,
                augmentation_index=img.augmentation_index,
                char_name=img.char_name,
            )
    logger.warning(
        "augmentation wiped all ink %d times for class %d instance %d; keeping original",
        _MAX_RETRIES,
        img.class_id,
        img.instance_id,
    )
    return img


def maybe_photometric(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Optional stage-2 view perturbation: dilation or erosion-like blur.

    Applied with probability 0.5 each; erosion keeps the raster nonempty
    by falling back to the input when it would wipe all ink.
    """
    out = pixels
    if rng.random() < 0.5:  # dilate: ink spreads to 4-neighbors
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    if rng.random() < 0.5:  # erode via mean blur + re-binarize
        padded = np.pad(out.astype(np.float64), 1)
        acc = sum(
            padded[1 + dy : CANVAS + 1 + dy, 1 + dx : CANVAS + 1 + dx]
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
        )
        eroded = (acc / 9.0 > 0.5).astype(np.uint8)
        if eroded.sum() > 0:
            out = eroded
    return out


def generate_augmented_set(ds, params: AugmentationParams, seed: int):
    """Expand a dataset with augmentations_per_instance perturbed copies per glyph.

    Originals are kept verbatim; each copy is tagged with its source
    instance and augmentation index and gets a fresh instance_id. Per-item
    RNG streams are derived by stable hashing of (seed, class, instance,
    index), so output is reproducible and order-independent.
    """
    from .dataset import Dataset  # local import to avoid a cycle

    out: list[GlyphImage] = list(ds.glyphs)
    by_class: dict[int, list[GlyphImage]] = {}
    for g in ds.glyphs:
        by_class.setdefault(g.class_id, []).append(g)

    for class_id in sorted(by_class):
        originals = sorted(by_class[class_id], key=lambda g: g.instance_id)
        next_id = max(g.instance_id for g in originals) + 1
        for src in originals:
            for k in range(params.augmentations_per_instance):
                rng = rng_for(seed, class_id, src.instance_id, k)
                aug = apply_affine_augmentation(src, params, rng)
                out.append(
                    GlyphImage(
                        pixels=aug.pixels,
                        class_id=src.class_id,
                        script_id=src.script_id,
                        instance_id=next_id,
                        source_instance_id=src.instance_id,
                        augmentation_index=k,
                        char_name=src.char_name,
                    )
                )
                next_id += 1

    return Dataset(glyphs=out, split=ds.split)
