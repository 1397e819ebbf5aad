"""Retrieval episodes, ranking metrics and report assembly.

Glyph-level quality is measured by N-way 1-shot retrieval (one positive
among N-1 distractors, cosine ranking). Script-level quality compares
embedding-induced script distances against curated similarity levels via
NDCG@k and tie-aware Spearman rank correlation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import Dataset, SimilarityLevelTable
from .encoder import EncoderParams, embed
from .glyphs import GlyphImage

REPORT_METRICS = ("n20r1", "n20r5", "ndcg10", "spearman_rho")


class EvaluationError(ValueError):
    """Raised for malformed episodes, rankings or report inputs."""


@dataclass(frozen=True)
class EvalConfig:
    n_way: int = 20
    k_values: tuple[int, ...] = (1, 5)
    episodes: int = 400
    ndcg_k: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_way < 2:
            raise EvaluationError(f"n_way must be >= 2, got {self.n_way}")
        if self.episodes < 1:
            raise EvaluationError(f"episodes must be >= 1, got {self.episodes}")


@dataclass
class Episode:
    """One retrieval trial: a query, N candidates, one of them positive."""

    query: GlyphImage
    candidates: list[GlyphImage]
    positive_index: int

    def __post_init__(self) -> None:
        n = len(self.candidates)
        if not 0 <= self.positive_index < n:
            raise EvaluationError(f"positive_index {self.positive_index} outside [0, {n})")
        same_idx = [i for i, c in enumerate(self.candidates) if c.class_id == self.query.class_id]
        if same_idx != [self.positive_index]:
            raise EvaluationError("exactly one candidate must share the query's class")
        if self.candidates[self.positive_index].instance_id == self.query.instance_id:
            raise EvaluationError("query and positive must be distinct instances")
        others = {c.class_id for i, c in enumerate(self.candidates) if i != self.positive_index}
        if len(others) != n - 1:
            raise EvaluationError("negative candidates must come from distinct classes")


def sample_episode(ds: Dataset, n_way: int, rng: np.random.Generator) -> Episode:
    """Draw one N-way 1-shot episode uniformly across the whole split."""
    by_class = ds.by_class()
    classes = sorted(by_class)
    if len(classes) < n_way:
        raise EvaluationError(f"need >= {n_way} classes, dataset has {len(classes)}")
    chosen = [classes[i] for i in rng.choice(len(classes), size=n_way, replace=False)]
    eligible = [c for c in chosen if len(by_class[c]) >= 2]
    if not eligible:
        raise EvaluationError("no sampled class has 2 instances to form a query/positive")
    target = eligible[int(rng.integers(len(eligible)))]

    t_idx = by_class[target]
    qi, pi = rng.choice(len(t_idx), size=2, replace=False)
    query = ds.glyphs[t_idx[qi]]
    positive = ds.glyphs[t_idx[pi]]

    candidates: list[GlyphImage] = [positive]
    for c in chosen:
        if c == target:
            continue
        idxs = by_class[c]
        candidates.append(ds.glyphs[idxs[int(rng.integers(len(idxs)))]])

    order = rng.permutation(len(candidates))
    cands = [candidates[i] for i in order]
    positive_index = int(np.nonzero(order == 0)[0][0])
    return Episode(query=query, candidates=cands, positive_index=positive_index)


def _dedupe_embed(
    images: list[GlyphImage], embed_fn: Callable[[np.ndarray], np.ndarray]
) -> list[np.ndarray]:
    """Embed a list of rasters, computing each distinct raster once."""
    keys: dict[bytes, int] = {}
    unique: list[np.ndarray] = []
    slots = []
    for g in images:
        key = g.pixels.tobytes()
        if key not in keys:
            keys[key] = len(unique)
            unique.append(g.pixels)
        slots.append(keys[key])
    embs = embed_fn(np.stack(unique))
    return [embs[i] for i in slots]


def positive_rank(
    query_emb: np.ndarray, candidate_embs: np.ndarray, positive_index: int
) -> int:
    """1-based rank of the positive under cosine-descending order.

    Ties break by candidate index ascending, so the outcome is
    deterministic for equal similarities.
    """
    sims = candidate_embs @ query_emb
    order = np.lexsort((np.arange(len(sims)), -sims))
    return int(np.nonzero(order == positive_index)[0][0]) + 1


def topk_accuracy(
    encoder: EncoderParams | Callable[[np.ndarray], np.ndarray],
    episodes: Sequence[Episode],
    k: int,
) -> float:
    """Fraction of episodes whose positive lands in the top-k ranking."""
    if not episodes:
        raise EvaluationError("no episodes to evaluate")
    n_way = len(episodes[0].candidates)
    if k > n_way:
        raise EvaluationError(f"k={k} exceeds the candidate count {n_way}")
    embed_fn = encoder if callable(encoder) else (lambda imgs: embed(encoder, imgs))

    flat: list[GlyphImage] = []
    for ep in episodes:
        flat.append(ep.query)
        flat.extend(ep.candidates)
    embs = _dedupe_embed(flat, embed_fn)

    hits = 0
    cursor = 0
    for ep in episodes:
        q = embs[cursor]
        c = np.stack(embs[cursor + 1 : cursor + 1 + len(ep.candidates)])
        cursor += 1 + len(ep.candidates)
        if positive_rank(q, c, ep.positive_index) <= k:
            hits += 1
    return hits / len(episodes)


def relevance_from_level(level: int) -> int:
    """Graded relevance of a similarity level: 1,2,3,4 -> 3,2,1,0."""
    if level not in (1, 2, 3, 4):
        raise EvaluationError(f"unknown similarity level {level!r}")
    return 4 - level


@dataclass
class RankingGroundTruth:
    """Curated level table plus the level -> relevance mapping."""

    table: SimilarityLevelTable
    rel: Callable[[int], float] = relevance_from_level

    def __post_init__(self) -> None:
        rels = [self.rel(lv) for lv in (1, 2, 3, 4)]
        if any(a < b for a, b in zip(rels, rels[1:])):
            raise EvaluationError(f"relevance must be non-increasing in level, got {rels}")
        if rels[-1] != 0:
            raise EvaluationError(f"relevance of the unrelated level must be 0, got {rels[-1]}")

    def relevance(self, query: str, other: str) -> float:
        return self.rel(self.table.level(query, other))


def dcg(relevances: Sequence[float], k: int) -> float:
    return sum(rel / math.log2(r + 2) for r, rel in enumerate(relevances[:k]))


def ndcg_at_k(
    ranked_script_ids: Sequence[str],
    query: str,
    gt: RankingGroundTruth,
    k: int,
) -> float:
    """Normalized DCG of one script ranking against curated levels.

    IDCG uses the ideal reordering of the same candidate set; all-zero
    relevance yields 0 by convention (callers flag such queries).
    """
    if query in ranked_script_ids:
        raise EvaluationError(f"query {query!r} must not appear in its own ranking")
    if k > len(ranked_script_ids):
        raise EvaluationError(f"k={k} exceeds ranking length {len(ranked_script_ids)}")
    rels = [gt.relevance(query, s) for s in ranked_script_ids]
    ideal = sorted(rels, reverse=True)
    idcg = dcg(ideal, k)
    if idcg == 0.0:
        return 0.0
    return dcg(rels, k) / idcg


@dataclass
class RankingEvalResult:
    per_query: dict[str, float]
    mean: float
    effective_k: int
    flagged: list[str] = field(default_factory=list)


def script_ranking_eval(
    script_ids: Sequence[str],
    dist_matrix: np.ndarray,
    gt: RankingGroundTruth,
    k: int = 10,
) -> RankingEvalResult:
    """NDCG@k per query script plus the mean over queries.

    Candidates are every other script, ranked by ascending distance with
    lexicographic tie-breaks. When fewer than k candidates exist, all are
    used and the effective k is recorded.
    """
    n = len(script_ids)
    if dist_matrix.shape != (n, n):
        raise EvaluationError(f"distance matrix shape {dist_matrix.shape} != ({n}, {n})")
    effective_k = min(k, n - 1)
    per_query: dict[str, float] = {}
    flagged: list[str] = []
    for qi, q in enumerate(script_ids):
        others = [(dist_matrix[qi, j], script_ids[j]) for j in range(n) if j != qi]
        others.sort(key=lambda pair: (pair[0], pair[1]))
        ranking = [sid for _, sid in others]
        score = ndcg_at_k(ranking, q, gt, effective_k)
        if all(gt.relevance(q, s) == 0 for s in ranking):
            flagged.append(q)
        per_query[q] = score
    mean = float(np.mean(list(per_query.values())))
    return RankingEvalResult(per_query=per_query, mean=mean, effective_k=effective_k, flagged=flagged)


def fractional_ranks(values: Sequence[float]) -> np.ndarray:
    """Average (fractional) ranks, 1-based; ties share their mean rank."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(len(arr), dtype=np.float64)
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(pairs: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Tie-aware Spearman correlation between distances and levels.

    Returns (rho, two-sided p) where p uses the large-n normal
    approximation z = rho * sqrt(n - 1). Reduces to the classic
    rank-difference formula when no ties exist.
    """
    if len(pairs) < 3:
        raise EvaluationError(f"need >= 3 pairs, got {len(pairs)}")
    d_vals = [p[0] for p in pairs]
    levels = [p[1] for p in pairs]
    r = fractional_ranks(d_vals)
    s = fractional_ranks(levels)
    if np.ptp(r) == 0 or np.ptp(s) == 0:
        raise EvaluationError("zero rank variance")
    rc = r - r.mean()
    sc = s - s.mean()
    rho = float((rc @ sc) / math.sqrt((rc @ rc) * (sc @ sc)))
    z = rho * math.sqrt(len(pairs) - 1)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return rho, p


def build_report(
    glyph_metrics: Optional[dict],
    script_metrics: Optional[dict],
    metadata: dict,
    separability: Optional[dict] = None,
) -> dict:
    """Assemble the run report with the four benchmark columns.

    glyph_metrics supplies n20r1/n20r5, script_metrics ndcg10 and
    spearman_rho; absent groups appear as nulls so partial runs still
    produce a schema-complete report.
    """
    report: dict = {m: None for m in REPORT_METRICS}
    for group in (glyph_metrics, script_metrics):
        if group is None:
            continue
        for key, value in group.items():
            if key in REPORT_METRICS and report[key] is not None:
                raise EvaluationError(f"duplicate metric key {key!r}")
            report[key] = value
    report["separability"] = separability
    for key in ("config_hash", "seed"):
        if key not in metadata:
            raise EvaluationError(f"metadata missing required key {key!r}")
    report.update(metadata)
    return report


def format_report_table(rows: dict[str, dict]) -> str:
    """Human-readable metric table, one row per evaluated model."""
    headers = ["Model", "N20R1", "N20R5", "NDCG10", "Spearman"]
    table = [headers]
    for name, rep in rows.items():
        table.append(
            [name]
            + [
                "-" if rep.get(m) is None else f"{rep[m]:.4f}"
                for m in REPORT_METRICS
            ]
        )
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report(path: Path | str, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
