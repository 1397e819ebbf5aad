"""Rendering synthetic glyph benchmarks from font files.

Each requested codepoint is rasterized with an adaptively chosen font
size so its ink bounding box fills at most 90% of the canvas on the
larger axis, then centered by that bounding box and binarized. Missing
glyphs (absent from the font cmap, or rendering to an empty box) are
skipped and recorded as omissions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from fontTools.ttLib import TTFont
from PIL import Image, ImageDraw, ImageFont

from .dataset import Dataset, DatasetError
from .glyphs import CANVAS, GlyphImage, binarize, save_glyph_png

logger = logging.getLogger(__name__)

FIT_FRACTION = 0.9


class RenderError(ValueError):
    """Raised for unreadable fonts or scripts that render to nothing."""


@lru_cache(maxsize=32)
def _cmap_codepoints(font_path: str) -> frozenset:
    try:
        with TTFont(font_path, lazy=True) as tt:
            return frozenset(tt.getBestCmap().keys())
    except Exception as exc:
        raise RenderError(f"unreadable font {font_path}: {exc}") from exc


def font_has_glyph(font: Path | str, codepoint: int) -> bool:
    return codepoint in _cmap_codepoints(str(font))


def _rasterize_at(char: str, font: ImageFont.FreeTypeFont, scratch: int) -> np.ndarray:
    img = Image.new("L", (scratch, scratch), 0)
    draw = ImageDraw.Draw(img)
    draw.text((scratch // 2, scratch // 2), char, fill=255, font=font, anchor="mm")
    return np.asarray(img, dtype=np.uint8)


def _ink_bbox(binary: np.ndarray) -> tuple[int, int, int, int] | None:
    rows = np.flatnonzero(binary.any(axis=1))
    cols = np.flatnonzero(binary.any(axis=0))
    if rows.size == 0:
        return None
    return rows[0], rows[-1], cols[0], cols[-1]


def render_unicode_glyph(
    codepoint: int, font: Path | str, canvas: int = CANVAS
) -> GlyphImage | None:
    """Render one codepoint centered on the canvas, or None if missing.

    The font size starts at the canvas height and is rescaled (up to four
    refinement passes) until the ink bounding box's larger axis lands
    within the 90% fit budget; the box is then pasted centered.
    """
    font_path = str(font)
    if not font_has_glyph(font_path, codepoint):
        return None
    char = chr(codepoint)
    target = int(round(FIT_FRACTION * canvas))
    scratch = canvas * 4

    size = canvas
    crop = None
    for _ in range(4):
        try:
            ft = ImageFont.truetype(font_path, size)
        except OSError as exc:
            raise RenderError(f"unreadable font {font_path}: {exc}") from exc
        binary = binarize(_rasterize_at(char, ft, scratch))
        bbox = _ink_bbox(binary)
        if bbox is None:
            return None  # blank glyph (e.g. a space-like character)
        r0, r1, c0, c1 = bbox
        longer = max(r1 - r0 + 1, c1 - c0 + 1)
        crop = binary[r0 : r1 + 1, c0 : c1 + 1]
        if longer == target:
            break
        new_size = max(4, int(round(size * target / longer)))
        if new_size == size:
            break
        size = new_size
        if size > scratch:  # degenerate metrics; keep last usable crop
            size = scratch
            break

    assert crop is not None
    h, w = crop.shape
    if h > canvas or w > canvas:  # safety crop, should not trigger after fitting
        crop = crop[:canvas, :canvas]
        h, w = crop.shape
    out = np.zeros((canvas, canvas), dtype=np.uint8)
    top = (canvas - h) // 2
    left = (canvas - w) // 2
    out[top : top + h, left : left + w] = crop
    if out.sum() == 0:
        return None
    return GlyphImage(
        pixels=out,
        class_id=codepoint,
        script_id="",
        instance_id=0,
        char_name=f"U+{codepoint:04X}",
    )


@dataclass
class ScriptRangeSpec:
    script: str
    intervals: list[tuple[int, int]]
    font_file: str


def parse_ranges_file(path: Path | str) -> list[ScriptRangeSpec]:
    """Parse `<script>\\t<hexStart>-<hexEnd>[,...]\\t<font_filename>` lines."""
    specs: list[ScriptRangeSpec] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"ranges line {lineno}: expected 3 fields, got {raw!r}")
        intervals = []
        for chunk in parts[1].split(","):
            lo, sep, hi = chunk.strip().partition("-")
            if not sep:
                raise DatasetError(f"ranges line {lineno}: bad interval {chunk!r}")
            start, end = int(lo, 16), int(hi, 16)
            if end < start:
                raise DatasetError(f"ranges line {lineno}: empty interval {chunk!r}")
            intervals.append((start, end))
        specs.append(ScriptRangeSpec(parts[0].strip(), intervals, parts[2].strip()))
    return specs


def build_unicode_dataset(
    ranges: Path | str, fonts: Path | str, out: Path | str | None = None
) -> tuple[Dataset, dict[str, list[int]]]:
    """Render every requested codepoint of every script.

    Returns the dataset plus an omissions map (script -> skipped
    codepoints). When `out` is given, images are written there as a
    standard corpus tree along with `omissions.json`.
    """
    fonts_dir = Path(fonts)
    specs = parse_ranges_file(ranges)
    glyphs: list[GlyphImage] = []
    omissions: dict[str, list[int]] = {}

    keys = sorted(
        (spec.script, cp)
        for spec in specs
        for lo, hi in spec.intervals
        for cp in range(lo, hi + 1)
    )
    class_of = {key: i for i, key in enumerate(keys)}

    for spec in specs:
        font_path = fonts_dir / spec.font_file
        if not font_path.is_file():
            raise RenderError(f"font file not found: {font_path}")
        rendered = 0
        omitted: list[int] = []
        for lo, hi in spec.intervals:
            for cp in range(lo, hi + 1):
                g = render_unicode_glyph(cp, font_path)
                if g is None:
                    omitted.append(cp)
                    continue
                glyphs.append(
                    GlyphImage(
                        pixels=g.pixels,
                        class_id=class_of[(spec.script, cp)],
                        script_id=spec.script,
                        instance_id=0,
                        char_name=f"U+{cp:04X}",
                    )
                )
                rendered += 1
        if omitted:
            omissions[spec.script] = omitted
            logger.info("script %s: %d codepoints omitted", spec.script, len(omitted))
        if rendered == 0 and spec.intervals:
            raise RenderError(f"script {spec.script!r} has no renderable codepoints")

    ds = Dataset(glyphs, split="evaluation")
    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for g in ds.glyphs:
            save_glyph_png(g.pixels, out_dir / g.script_id / g.char_name / "g000.png")
        omission_doc = {s: [f"U+{c:04X}" for c in cps] for s, cps in omissions.items()}
        (out_dir / "omissions.json").write_text(
            json.dumps(omission_doc, indent=2, sort_keys=True), encoding="utf-8"
        )
    return ds, omissions
