"""Corpus ingestion, split handling and batch/pair sampling.

Directory layout follows the handwriting-corpus convention
``root/<script>/<character>/<instance>.png``; a split manifest assigns
every script to exactly one of the three splits. Class ids are assigned
lexicographically over (script, character) so they do not depend on the
manifest or on filesystem enumeration order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .augment import AugmentationParams, apply_affine_augmentation
from .glyphs import CANVAS, GlyphError, GlyphImage, load_glyph_png, save_glyph_png

logger = logging.getLogger(__name__)

SPLITS = ("supervised_invented", "unsupervised_historical", "evaluation")


class DatasetError(ValueError):
    """Raised for malformed corpora, manifests or sampling preconditions."""


@dataclass
class Dataset:
    """A collection of glyphs plus the split it belongs to.

    class_count is derived (number of distinct class ids); script_ids is
    the sorted list of scripts present.
    """

    glyphs: list[GlyphImage]
    split: str = "all"

    def __post_init__(self) -> None:
        seen: dict[int, str] = {}
        for g in self.glyphs:
            prev = seen.setdefault(g.class_id, g.script_id)
            if prev != g.script_id:
                raise DatasetError(
                    f"class {g.class_id} mapped to scripts {prev!r} and {g.script_id!r}"
                )

    @property
    def class_count(self) -> int:
        return len({g.class_id for g in self.glyphs})

    @property
    def script_ids(self) -> list[str]:
        return sorted({g.script_id for g in self.glyphs})

    def __len__(self) -> int:
        return len(self.glyphs)

    def by_class(self) -> dict[int, list[int]]:
        """class_id -> glyph indices, each index list in instance_id order."""
        out: dict[int, list[int]] = {}
        for i, g in enumerate(self.glyphs):
            out.setdefault(g.class_id, []).append(i)
        for idxs in out.values():
            idxs.sort(key=lambda i: self.glyphs[i].instance_id)
        return out

    def images_array(self) -> np.ndarray:
        """Stack all rasters into a (N, 105, 105) uint8 array."""
        return np.stack([g.pixels for g in self.glyphs]).astype(np.uint8)

    def subset(self, indices: Iterable[int], split: Optional[str] = None) -> "Dataset":
        return Dataset([self.glyphs[i] for i in indices], split or self.split)

    def restrict_to_scripts(self, scripts: Iterable[str], split: Optional[str] = None) -> "Dataset":
        wanted = set(scripts)
        return Dataset([g for g in self.glyphs if g.script_id in wanted], split or self.split)


def parse_split_manifest(path: Path | str) -> dict[str, str]:
    """Read `<script>\\t<split>` lines into a script -> split mapping."""
    assignment: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"manifest line {lineno}: expected 2 tab-separated fields, got {raw!r}")
        script, split = parts[0].strip(), parts[1].strip()
        if split not in SPLITS:
            raise DatasetError(f"manifest line {lineno}: unknown split {split!r}")
        if script in assignment and assignment[script] != split:
            raise DatasetError(f"script assigned to two splits: {script!r}")
        assignment[script] = split
    return assignment


def _scan_tree(root: Path) -> dict[str, dict[str, list[Path]]]:
    """script -> character -> sorted instance image paths."""
    tree: dict[str, dict[str, list[Path]]] = {}
    for script_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        chars: dict[str, list[Path]] = {}
        for char_dir in sorted(p for p in script_dir.iterdir() if p.is_dir()):
            files = sorted(p for p in char_dir.iterdir() if p.suffix.lower() == ".png")
            if files:
                chars[char_dir.name] = files
        if chars:
            tree[script_dir.name] = chars
    return tree


def _parse_provenance(stem: str) -> tuple[Optional[int], Optional[int]]:
    """Recover (source_instance_id, augmentation_index) from an `a<src>_<k>` stem."""
    if stem.startswith("a") and "_" in stem:
        src, _, k = stem[1:].partition("_")
        if src.isdigit() and k.isdigit():
            return int(src), int(k)
    return None, None


def load_tree(root: Path | str, split: str = "all") -> Dataset:
    """Load every script under a corpus root, without a manifest."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"corpus root {root} is not a directory")
    tree = _scan_tree(root)
    class_keys = sorted((s, c) for s, chars in tree.items() for c in chars)
    class_of = {key: i for i, key in enumerate(class_keys)}

    glyphs: list[GlyphImage] = []
    for script, chars in tree.items():
        for char, files in chars.items():
            cid = class_of[(script, char)]
            for inst, path in enumerate(files):
                src, k = _parse_provenance(path.stem)
                glyphs.append(
                    GlyphImage(
                        pixels=load_glyph_png(path),
                        class_id=cid,
                        script_id=script,
                        instance_id=inst,
                        source_instance_id=src,
                        augmentation_index=k,
                        char_name=char,
                    )
                )
    return Dataset(glyphs, split)


def load_omniglot(root: Path | str, split_manifest: Path | str) -> Dataset:
    """Load a handwriting corpus and attach a three-way split assignment.

    Every script listed in the manifest must exist under root, and every
    script under root must be assigned to exactly one split. The returned
    dataset covers the full corpus; use :func:`split_dataset` to project
    out one split.
    """
    root = Path(root)
    assignment = parse_split_manifest(split_manifest)
    tree = _scan_tree(root)

    missing = sorted(set(assignment) - set(tree))
    if missing:
        raise DatasetError(f"script listed in manifest but missing from root: {missing}")
    unassigned = sorted(set(tree) - set(assignment))
    if unassigned:
        raise DatasetError(f"script assigned to no split: {unassigned}")

    ds = load_tree(root, split="all")
    ds.split_assignment = assignment  # type: ignore[attr-defined]
    return ds


def split_dataset(ds: Dataset, split: str) -> Dataset:
    """Project the glyphs of one split out of a manifest-annotated dataset."""
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    assignment: dict[str, str] = getattr(ds, "split_assignment", None) or {}
    if not assignment:
        raise DatasetError("dataset carries no split assignment; load via load_omniglot")
    scripts = [s for s, sp in assignment.items() if sp == split]
    sub = ds.restrict_to_scripts(scripts, split=split)
    if split == "supervised_invented":
        for cid, idxs in sub.by_class().items():
            if len(idxs) < 2:
                raise DatasetError(f"supervised class {cid} has fewer than 2 instances")
    return sub


def write_dataset(ds: Dataset, out_dir: Path | str) -> None:
    """Persist a dataset as a `<script>/<char>/<instance>.png` tree.

    Originals are written as ``g<id>.png``, augmented copies as
    ``a<source>_<index>.png`` so provenance survives a round trip.
    """
    out = Path(out_dir)
    for g in ds.glyphs:
        char = g.char_name or f"character{g.class_id:04d}"
        if g.augmentation_index is not None:
            name = f"a{g.source_instance_id:03d}_{g.augmentation_index:03d}.png"
        else:
            name = f"g{g.instance_id:03d}.png"
        save_glyph_png(g.pixels, out / g.script_id / char / name)


def merge_datasets(parts: Iterable[Dataset], split: str = "all") -> Dataset:
    """Pool several datasets, re-keying class ids by (script, character).

    Scripts must not repeat across parts (split disjointness).
    """
    parts = list(parts)
    seen_scripts: set[str] = set()
    for p in parts:
        overlap = seen_scripts & set(p.script_ids)
        if overlap:
            raise DatasetError(f"script(s) {sorted(overlap)} appear in two merged datasets")
        seen_scripts |= set(p.script_ids)

    keys = sorted(
        {(g.script_id, g.char_name or str(g.class_id)) for p in parts for g in p.glyphs}
    )
    class_of = {key: i for i, key in enumerate(keys)}
    glyphs = []
    for p in parts:
        for g in p.glyphs:
            glyphs.append(
                GlyphImage(
                    pixels=g.pixels,
                    class_id=class_of[(g.script_id, g.char_name or str(g.class_id))],
                    script_id=g.script_id,
                    instance_id=g.instance_id,
                    source_instance_id=g.source_instance_id,
                    augmentation_index=g.augmentation_index,
                    char_name=g.char_name,
                )
            )
    return Dataset(glyphs, split)


@dataclass
class SimilarityLevelTable:
    """Curated pairwise script relationship levels.

    Keys are unordered script pairs; levels 1 (very similar) to 3 (very
    different). Pairs not listed default to level 4 (unrelated).
    """

    entries: dict[frozenset, int] = field(default_factory=dict)
    default_level: int = 4

    def set_level(self, a: str, b: str, level: int) -> None:
        if a == b:
            raise DatasetError(f"self-pair not allowed: {a!r}")
        if level not in (1, 2, 3):
            raise DatasetError(f"level must be 1, 2 or 3, got {level}")
        key = frozenset((a, b))
        if key in self.entries and self.entries[key] != level:
            raise DatasetError(f"conflicting levels for pair ({a!r}, {b!r})")
        self.entries[key] = level

    def level(self, a: str, b: str) -> int:
        if a == b:
            raise DatasetError(f"level of a script with itself is undefined: {a!r}")
        return self.entries.get(frozenset((a, b)), self.default_level)

    @classmethod
    def from_file(cls, path: Path | str) -> "SimilarityLevelTable":
        table = cls()
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(
                    f"levels line {lineno}: expected `a\\tb\\tlevel`, got {raw!r}"
                )
            try:
                level = int(parts[2])
            except ValueError as exc:
                raise DatasetError(f"levels line {lineno}: bad level {parts[2]!r}") from exc
            table.set_level(parts[0].strip(), parts[1].strip(), level)
        return table

    def scripts(self) -> list[str]:
        return sorted({s for key in self.entries for s in key})


def sample_supervised_batch(
    ds: Dataset, batch_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw a labeled batch where every selected class appears >= 2 times.

    Returns (images, labels) with images (B, 105, 105) uint8 and labels
    the class ids. Guarantees every anchor in the batch has a positive.
    """
    if batch_size < 4:
        raise DatasetError(f"batch_size must be >= 4, got {batch_size}")
    by_class = {c: idxs for c, idxs in ds.by_class().items() if len(idxs) >= 2}
    if len(by_class) < 2:
        raise DatasetError("need at least 2 classes with >= 2 instances")

    classes = sorted(by_class)
    n_classes = min(batch_size // 2, len(classes))
    chosen = rng.choice(len(classes), size=n_classes, replace=False)
    chosen_classes = [classes[i] for i in chosen]

    quotas = {c: 2 for c in chosen_classes}
    spare = batch_size - 2 * n_classes
    order = list(chosen_classes)
    pos = 0
    while spare > 0:
        quotas[order[pos % len(order)]] += 1
        pos += 1
        spare -= 1

    picked: list[int] = []
    for c in chosen_classes:
        idxs = by_class[c]
        take = quotas[c]
        if take <= len(idxs):
            sel = rng.choice(len(idxs), size=take, replace=False)
        else:
            # class exhausted: top up with replacement, keeping >=2 distinct
            sel = np.concatenate(
                [
                    rng.choice(len(idxs), size=len(idxs), replace=False),
                    rng.choice(len(idxs), size=take - len(idxs), replace=True),
                ]
            )
        picked.extend(idxs[j] for j in sel)

    images = np.stack([ds.glyphs[i].pixels for i in picked])
    labels = np.array([ds.glyphs[i].class_id for i in picked], dtype=np.int64)
    return images, labels


def sample_class_pairs(
    ds: Dataset,
    class_count: int,
    rng: np.random.Generator,
    params: Optional[AugmentationParams] = None,
) -> list[tuple[GlyphImage, GlyphImage]]:
    """Sample one augmented view pair of distinct genuine instances per class.

    Classes with a single genuine instance are excluded with a warning.
    class_count beyond the number of eligible classes uses all of them.
    """
    if class_count < 0:
        raise DatasetError(f"class_count must be >= 0, got {class_count}")
    if class_count == 0:
        return []
    params = params or AugmentationParams()

    genuine: dict[int, list[int]] = {}
    for i, g in enumerate(ds.glyphs):
        if not g.is_augmented:
            genuine.setdefault(g.class_id, []).append(i)
    eligible = sorted(c for c, idxs in genuine.items() if len(idxs) >= 2)
    skipped = sorted(set(genuine) - set(eligible))
    if skipped:
        logger.warning("excluding %d single-instance classes from pairing", len(skipped))
    if not eligible:
        raise DatasetError("no class has 2 genuine instances")

    take = min(class_count, len(eligible))
    chosen = rng.choice(len(eligible), size=take, replace=False)
    pairs: list[tuple[GlyphImage, GlyphImage]] = []
    for j in chosen:
        idxs = genuine[eligible[j]]
        a, b = rng.choice(len(idxs), size=2, replace=False)
        v1 = apply_affine_augmentation(ds.glyphs[idxs[a]], params, rng)
        v2 = apply_affine_augmentation(ds.glyphs[idxs[b]], params, rng)
        pairs.append((v1, v2))
    return pairs
