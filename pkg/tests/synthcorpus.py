"""Synthetic handwriting-style corpora for tests.

Generates glyph classes as stroke prototypes (momentum random walks) and
instances as jittered renderings, written in the standard corpus layout
``root/<script>/<character>/<instance>.png`` or returned in memory.

Scripts can be derived from a parent script with a controlled
deformation, producing families of visually related writing systems with
known ground-truth relationship strength. Everything is deterministic in
the master seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from glyphsim.dataset import Dataset
from glyphsim.glyphs import CANVAS, GlyphImage
from glyphsim.util import rng_for

STYLES = {
    # n_strokes range, points per stroke, step length, momentum, line width
    "curvy": {"strokes": (2, 3), "points": 6, "step": 16.0, "momentum": 0.78, "width": 5},
    "angular": {"strokes": (4, 6), "points": 3, "step": 13.0, "momentum": 0.15, "width": 3},
}


@dataclass
class ScriptSpec:
    name: str
    n_classes: int
    n_instances: int
    style: str = "curvy"
    parent: Optional[str] = None
    deformation: float = 0.0


def _walk_stroke(rng: np.random.Generator, style: dict) -> np.ndarray:
    center = np.array([CANVAS / 2, CANVAS / 2])
    start = rng.uniform(22, 83, size=2)
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction)
    pts = [start]
    for _ in range(style["points"] - 1):
        fresh = rng.normal(size=2)
        fresh /= np.linalg.norm(fresh)
        pull = center - pts[-1]
        pull_strength = min(1.0, np.linalg.norm(pull) / 45.0) * 0.45
        pull /= max(np.linalg.norm(pull), 1e-9)
        direction = (
            style["momentum"] * direction
            + (1 - style["momentum"]) * fresh
            + pull_strength * pull
        )
        direction /= np.linalg.norm(direction)
        pts.append(np.clip(pts[-1] + direction * style["step"], 10, 95))
    return np.stack(pts)


def _class_prototype(rng: np.random.Generator, style_name: str) -> list[np.ndarray]:
    style = STYLES[style_name]
    n = int(rng.integers(style["strokes"][0], style["strokes"][1] + 1))
    return [_walk_stroke(rng, style) for _ in range(n)]


def _deform_prototype(
    strokes: list[np.ndarray], amount: float, rng: np.random.Generator
) -> list[np.ndarray]:
    """Systematic per-class deformation: affine drift plus point noise."""
    angle = np.deg2rad(rng.uniform(-24, 24) * amount)
    scale = 1.0 + rng.uniform(-0.18, 0.18) * amount
    rot = scale * np.array(
        [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
    )
    shift = rng.uniform(-6, 6, size=2) * amount
    center = np.array([CANVAS / 2, CANVAS / 2])
    out = []
    for s in strokes:
        pts = (s - center) @ rot.T + center + shift
        pts = pts + rng.normal(scale=6.0 * amount, size=pts.shape)
        out.append(np.clip(pts, 6, 99))
    return out


def _render(strokes: list[np.ndarray], width: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one jittered instance of a prototype to a binary array."""
    angle = np.deg2rad(rng.uniform(-5, 5))
    scale = rng.uniform(0.95, 1.05)
    rot = scale * np.array(
        [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
    )
    shift = rng.uniform(-2, 2, size=2)
    center = np.array([CANVAS / 2, CANVAS / 2])

    img = Image.new("L", (CANVAS, CANVAS), 0)
    draw = ImageDraw.Draw(img)
    for s in strokes:
        pts = s + rng.normal(scale=1.1, size=s.shape)
        pts = (pts - center) @ rot.T + center + shift
        draw.line([tuple(p) for p in pts], fill=255, width=width, joint="curve")
    binary = (np.asarray(img) > 127).astype(np.uint8)
    if binary.sum() == 0:  # pathological jitter; draw an unjittered fallback
        draw.line([tuple(p) for p in strokes[0]], fill=255, width=width)
        binary = (np.asarray(img) > 127).astype(np.uint8)
    return binary


def build_prototypes(
    specs: list[ScriptSpec], seed: int
) -> dict[str, list[list[np.ndarray]]]:
    """Per-script class prototypes, honoring parent/deformation links."""
    by_name = {s.name: s for s in specs}
    protos: dict[str, list[list[np.ndarray]]] = {}

    def build(spec: ScriptSpec) -> list[list[np.ndarray]]:
        if spec.name in protos:
            return protos[spec.name]
        if spec.parent is not None:
            parent_protos = build(by_name[spec.parent])
            if spec.n_classes > len(parent_protos):
                raise ValueError(
                    f"{spec.name}: derived script cannot have more classes than parent"
                )
            result = [
                _deform_prototype(
                    parent_protos[c], spec.deformation, rng_for(seed, "deform", spec.name, c)
                )
                for c in range(spec.n_classes)
            ]
        else:
            result = [
                _class_prototype(rng_for(seed, "proto", spec.name, c), spec.style)
                for c in range(spec.n_classes)
            ]
        protos[spec.name] = result
        return result

    for spec in specs:
        build(spec)
    return protos


def make_dataset(specs: list[ScriptSpec], seed: int, split: str = "all") -> Dataset:
    """In-memory corpus; class ids are lexicographic over (script, char)."""
    protos = build_prototypes(specs, seed)
    keys = sorted(
        (spec.name, f"char{c:03d}") for spec in specs for c in range(spec.n_classes)
    )
    class_of = {key: i for i, key in enumerate(keys)}
    glyphs = []
    for spec in sorted(specs, key=lambda s: s.name):
        width = STYLES[spec.style]["width"]
        for c in range(spec.n_classes):
            char = f"char{c:03d}"
            for inst in range(spec.n_instances):
                pixels = _render(
                    protos[spec.name][c], width, rng_for(seed, "inst", spec.name, c, inst)
                )
                glyphs.append(
                    GlyphImage(
                        pixels=pixels,
                        class_id=class_of[(spec.name, char)],
                        script_id=spec.name,
                        instance_id=inst,
                        char_name=char,
                    )
                )
    return Dataset(glyphs, split)


def write_corpus(root: Path, specs: list[ScriptSpec], seed: int) -> Dataset:
    """Write the corpus as black-on-white PNGs in the standard tree."""
    ds = make_dataset(specs, seed)
    for g in ds.glyphs:
        path = root / g.script_id / g.char_name / f"g{g.instance_id:03d}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(((1 - g.pixels) * 255).astype(np.uint8), "L").save(path)
    return ds
