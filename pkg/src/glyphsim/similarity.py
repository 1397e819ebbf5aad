"""Glyph- and script-level (dis)similarities over frozen embeddings.

A script is a finite set of unit-norm glyph embeddings. Script-to-script
dissimilarity aggregates glyph cosine distances through exact
nearest-neighbor matching (mean of per-glyph minima, then symmetrized);
no approximation is used.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-4


class SimilarityError(ValueError):
    """Raised for empty sets, non-unit embeddings or degenerate ratios."""


def _check_unit(vectors: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(vectors, axis=-1)
    err = float(np.abs(norms - 1.0).max())
    if err > UNIT_TOLERANCE:
        raise SimilarityError(f"{what} must be unit-norm (max deviation {err:.2e})")


@dataclass
class ScriptSet:
    """One writing system as a nonempty stack of unit embeddings.

    class_ids/instance_ids are optional per-row identity, used by the
    centroid mode and the CSV export.
    """

    script_id: str
    embeddings: np.ndarray
    class_ids: Optional[np.ndarray] = None
    instance_ids: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] == 0:
            raise SimilarityError(
                f"script {self.script_id!r} needs a nonempty (n, d) embedding matrix"
            )
        _check_unit(self.embeddings, f"script {self.script_id!r} embeddings")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def centroids(self) -> "ScriptSet":
        """Collapse to one re-normalized centroid per glyph class."""
        if self.class_ids is None:
            raise SimilarityError(f"script {self.script_id!r} has no class ids")
        rows = []
        cids = []
        for cid in np.unique(self.class_ids):
            mean = self.embeddings[self.class_ids == cid].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0:
                raise SimilarityError(f"class {cid} centroid vanishes")
            rows.append(mean / norm)
            cids.append(cid)
        return ScriptSet(self.script_id, np.stack(rows), class_ids=np.array(cids))


def glyph_similarity(z1: np.ndarray, z2: np.ndarray) -> float:
    """Cosine of two unit embeddings; in [-1, 1].

    The raw float dot product can overshoot +-1 by an ulp; it is clamped
    so the stated range (and zero self-distance) holds exactly.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    _check_unit(z1, "z1")
    _check_unit(z2, "z2")
    return float(np.clip(z1 @ z2, -1.0, 1.0))


def glyph_distance(z1: np.ndarray, z2: np.ndarray) -> float:
    """1 - cosine; in [0, 2]."""
    return 1.0 - glyph_similarity(z1, z2)


def directed_script_distance(s1: ScriptSet, s2: ScriptSet) -> float:
    """Mean over s1 glyphs of the distance to their nearest s2 glyph.

    Exact O(|s1| * |s2|) computation.
    """
    sims = np.clip(s1.embeddings @ s2.embeddings.T, -1.0, 1.0)
    return float(np.mean(1.0 - sims.max(axis=1)))


def script_distance(s1: ScriptSet, s2: ScriptSet) -> float:
    """Symmetrized script dissimilarity: half-sum of both directions."""
    return 0.5 * (directed_script_distance(s1, s2) + directed_script_distance(s2, s1))


def script_distance_matrix(scripts: Sequence[ScriptSet]) -> tuple[list[str], np.ndarray]:
    """All pairwise script distances; rows/columns follow input order."""
    if len(scripts) < 2:
        raise SimilarityError("need at least 2 scripts for a distance matrix")
    ids = [s.script_id for s in scripts]
    if len(set(ids)) != len(ids):
        raise SimilarityError(f"duplicate script ids in {ids}")
    n = len(scripts)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = script_distance(scripts[i], scripts[j])
            mat[i, j] = d
            mat[j, i] = d
    return ids, mat


def separability_ratio(related_a: ScriptSet, related_b: ScriptSet, unrelated_c: ScriptSet) -> float:
    """Related-pair distance over mean distance to the unrelated script.

    Below 1 means the related pair sits proportionally closer together
    than either does to the unrelated script; lower is better.
    """
    names = {related_a.script_id, related_b.script_id, unrelated_c.script_id}
    if len(names) != 3:
        raise SimilarityError(f"three distinct scripts required, got {sorted(names)}")
    numer = script_distance(related_a, related_b)
    denom = 0.5 * (
        script_distance(unrelated_c, related_a) + script_distance(unrelated_c, related_b)
    )
    if denom == 0.0:
        raise SimilarityError("unrelated script coincides with related pair")
    return numer / denom


def build_script_sets(
    dataset,
    embeddings: np.ndarray,
    centroid_mode: bool = False,
) -> list[ScriptSet]:
    """Group per-glyph embeddings of a dataset into per-script sets.

    Row i of `embeddings` must correspond to dataset.glyphs[i]. Scripts
    come out sorted by id.
    """
    if len(dataset.glyphs) != embeddings.shape[0]:
        raise SimilarityError(
            f"embeddings rows ({embeddings.shape[0]}) != glyphs ({len(dataset.glyphs)})"
        )
    by_script: dict[str, list[int]] = {}
    for i, g in enumerate(dataset.glyphs):
        by_script.setdefault(g.script_id, []).append(i)
    sets = []
    for sid in sorted(by_script):
        idxs = by_script[sid]
        ss = ScriptSet(
            sid,
            embeddings[idxs],
            class_ids=np.array([dataset.glyphs[i].class_id for i in idxs]),
            instance_ids=np.array([dataset.glyphs[i].instance_id for i in idxs]),
        )
        sets.append(ss.centroids() if centroid_mode else ss)
    return sets


# ---------------------------------------------------------------------------
# Embedding store: one-line JSON header + little-endian f32 rows
# ---------------------------------------------------------------------------


def write_embedding_store(path: Path | str, script_set: ScriptSet, config_hash: str = "") -> None:
    emb = np.ascontiguousarray(script_set.embeddings, dtype="<f4")
    header = {
        "format": "glyphsim-embeddings",
        "script_id": script_set.script_id,
        "d": int(emb.shape[1]),
        "count": int(emb.shape[0]),
        "class_ids": None
        if script_set.class_ids is None
        else [int(c) for c in script_set.class_ids],
        "instance_ids": None
        if script_set.instance_ids is None
        else [int(c) for c in script_set.instance_ids],
        "config_hash": config_hash,
    }
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(emb.tobytes())


def read_embedding_store(path: Path | str) -> ScriptSet:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise SimilarityError(f"{path}: missing store header")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != "glyphsim-embeddings":
        raise SimilarityError(f"{path}: not an embedding store")
    emb = np.frombuffer(raw[nl + 1 :], dtype="<f4").reshape(header["count"], header["d"])
    return ScriptSet(
        header["script_id"],
        emb.astype(np.float64),
        class_ids=None if header["class_ids"] is None else np.array(header["class_ids"]),
        instance_ids=None
        if header["instance_ids"] is None
        else np.array(header["instance_ids"]),
    )


def export_embeddings_csv(path: Path | str, scripts: Iterable[ScriptSet]) -> None:
    """Plot-friendly flat CSV: script_id,class_id,instance_id,v0..v{d-1}."""
    scripts = list(scripts)
    if not scripts:
        raise SimilarityError("nothing to export")
    d = scripts[0].embeddings.shape[1]
    lines = ["script_id,class_id,instance_id," + ",".join(f"v{i}" for i in range(d))]
    for ss in scripts:
        for row in range(len(ss)):
            cid = "" if ss.class_ids is None else int(ss.class_ids[row])
            iid = "" if ss.instance_ids is None else int(ss.instance_ids[row])
            vals = ",".join(repr(float(v)) for v in ss.embeddings[row])
            lines.append(f"{ss.script_id},{cid},{iid},{vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_distance_matrix_csv(path: Path | str, ids: Sequence[str], matrix: np.ndarray) -> None:
    lines = ["script_id," + ",".join(ids)]
    for i, sid in enumerate(ids):
        lines.append(sid + "," + ",".join(repr(float(v)) for v in matrix[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
