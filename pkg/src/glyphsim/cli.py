"""Command-line entry point: prepare, render-unicode, train-teacher,
train-student, embed, eval, report.

All commands are deterministic under a fixed --seed; --threads 1 pins
torch to one thread for bit-exact replay. Every artifact written embeds
the resolved config hash and tool version.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .augment import AugmentationParams, generate_augmented_set
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    SPLITS,
    Dataset,
    DatasetError,
    SimilarityLevelTable,
    load_omniglot,
    load_tree,
    merge_datasets,
    split_dataset,
)
from .encoder import EncoderConfig, embed
from .evaluation import (
    EvalConfig,
    RankingGroundTruth,
    build_report,
    format_report_table,
    sample_episode,
    script_ranking_eval,
    spearman_rho,
    topk_accuracy,
    write_report,
)
from .render import build_unicode_dataset
from .similarity import (
    build_script_sets,
    export_distance_matrix_csv,
    export_embeddings_csv,
    script_distance_matrix,
    separability_ratio,
    write_embedding_store,
)
from .training import Stage1Config, Stage2Config, train_stage1, train_stage2
from .util import config_hash, rng_for


@dataclass
class RunConfig:
    """Composite configuration for a full pipeline run."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    augment: AugmentationParams = field(default_factory=AugmentationParams)

    def to_dict(self) -> dict:
        doc = {
            "encoder": asdict(self.encoder),
            "stage1": asdict(self.stage1),
            "stage2": asdict(self.stage2),
            "eval": asdict(self.eval),
            "augment": asdict(self.augment),
        }
        doc["eval"]["k_values"] = list(doc["eval"]["k_values"])
        for key in ("rotation_range", "shear_range", "zoom_range", "translation_range"):
            doc["augment"][key] = list(doc["augment"][key])
        return doc

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _build_section(cls, doc: dict, overrides: Optional[dict] = None):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    merged = dict(doc)
    merged.update(overrides or {})
    tuple_fields = {"k_values", "rotation_range", "shear_range", "zoom_range", "translation_range"}
    for key in tuple_fields & set(merged):
        merged[key] = tuple(merged[key])
    return cls(**merged)


def load_run_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    """Read the declarative JSON config; --seed overrides every section seed."""
    doc = {}
    if path:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    seed_over = {} if seed is None else {"seed": seed}
    return RunConfig(
        encoder=_build_section(EncoderConfig, doc.get("encoder", {}), seed_over),
        stage1=_build_section(Stage1Config, doc.get("stage1", {}), seed_over),
        stage2=_build_section(Stage2Config, doc.get("stage2", {}), seed_over),
        eval=_build_section(EvalConfig, doc.get("eval", {}), seed_over),
        augment=_build_section(AugmentationParams, doc.get("augment", {})),
    )


def _write_meta(out_dir: Path, cfg: RunConfig, extra: dict) -> None:
    doc = {"config_hash": cfg.hash, "tool_version": __version__}
    doc.update(extra)
    (out_dir / "meta.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def cmd_prepare(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_omniglot(args.data_root, args.manifest)
    counts = {}
    for split in SPLITS:
        sub = split_dataset(corpus, split)
        if split == "supervised_invented" and len(sub.glyphs):
            sub = generate_augmented_set(sub, cfg.augment, seed=cfg.stage1.seed)
        split_dir = out / split
        if split_dir.exists():
            shutil.rmtree(split_dir)
        from .dataset import write_dataset

        write_dataset(sub, split_dir)
        counts[split] = {"glyphs": len(sub.glyphs), "classes": sub.class_count}
        print(f"prepare: {split}: {len(sub.glyphs)} glyphs, {sub.class_count} classes")
    shutil.copyfile(args.manifest, out / "manifest.tsv")
    _write_meta(out, cfg, {"command": "prepare", "counts": counts, "seed": cfg.stage1.seed})
    return 0


def cmd_render_unicode(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, omissions = build_unicode_dataset(args.ranges, args.fonts, out)
    _write_meta(
        out,
        cfg,
        {
            "command": "render-unicode",
            "glyphs": len(ds.glyphs),
            "scripts": ds.script_ids,
            "omitted": sum(len(v) for v in omissions.values()),
        },
    )
    print(f"render-unicode: {len(ds.glyphs)} glyphs across {len(ds.script_ids)} scripts")
    return 0


def cmd_train_teacher(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_tree(args.data, split="supervised_invented")
    teacher, log = train_stage1(cfg.stage1, ds, cfg.encoder)
    save_checkpoint(
        out / "teacher.ckpt",
        teacher,
        metadata={
            "stage": "stage1",
            "step": log.summary["steps"],
            "config_hash": cfg.hash,
            "seed": cfg.stage1.seed,
        },
    )
    log.to_csv(out / "stage1_log.csv")
    log.write_summary(out / "stage1_summary.json")
    print(f"train-teacher: {log.summary['steps']} steps, final loss {log.summary['final_loss']:.4f}")
    return 0


def cmd_train_student(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_root = Path(args.data)

    if args.init == "random":
        # from-scratch baseline trains on the combined unlabeled pool
        parts = []
        for split in ("supervised_invented", "unsupervised_historical"):
            split_dir = data_root / split
            if split_dir.is_dir():
                tree = load_tree(split_dir, split=split)
                genuine = [i for i, g in enumerate(tree.glyphs) if not g.is_augmented]
                parts.append(tree.subset(genuine))
        if not parts:
            raise DatasetError(f"no split directories found under {data_root}")
        ds = merge_datasets(parts, split="unsupervised_historical")
        teacher = None
        stage2 = Stage2Config(**{**asdict(cfg.stage2), "init_mode": "random"})
    else:
        teacher, _, teacher_meta = load_checkpoint(args.init)
        unsup = data_root / "unsupervised_historical"
        ds = load_tree(unsup if unsup.is_dir() else data_root, split="unsupervised_historical")
        stage2 = Stage2Config(**{**asdict(cfg.stage2), "init_mode": "teacher"})

    student, target, predictor, log = train_stage2(
        stage2, ds, teacher, cfg.encoder, cfg.augment
    )
    meta = {
        "stage": "stage2",
        "step": log.summary["steps"],
        "config_hash": cfg.hash,
        "seed": stage2.seed,
        "init_mode": stage2.init_mode,
    }
    save_checkpoint(out / "student.ckpt", student, predictor, metadata=meta)
    save_checkpoint(out / "target.ckpt", target, metadata=meta)
    log.to_csv(out / "stage2_log.csv")
    log.write_summary(out / "stage2_summary.json")
    final = log.summary["final_loss"]
    print(
        f"train-student[{stage2.init_mode}]: {log.summary['steps']} steps"
        + ("" if final is None else f", final loss {final:.4f}")
    )
    return 0


def cmd_embed(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, _, meta = load_checkpoint(args.checkpoint)
    if args.expect_dim and params.config.embedding_dim != args.expect_dim:
        raise ValueError(
            f"checkpoint embedding_dim {params.config.embedding_dim} != requested {args.expect_dim}"
        )
    ds = load_tree(args.data)
    if not ds.glyphs:
        raise DatasetError(f"no glyphs found under {args.data}")
    embeddings = embed(params, ds.images_array())
    sets = build_script_sets(ds, embeddings, centroid_mode=args.centroids)
    for ss in sets:
        write_embedding_store(out / f"{ss.script_id}.emb", ss, config_hash=cfg.hash)
    export_embeddings_csv(out / "embeddings.csv", sets)
    print(f"embed: wrote {len(sets)} script stores ({len(ds.glyphs)} glyphs)")
    return 0


def _eval_one(params, label: str, ds: Dataset, episodes, cfg: RunConfig,
              table: Optional[SimilarityLevelTable], triples) -> dict:
    embeddings = embed(params, ds.images_array())

    def embed_fn(images: np.ndarray) -> np.ndarray:
        return embed(params, images)

    glyph_metrics = {}
    for k in cfg.eval.k_values:
        glyph_metrics[f"n20r{k}"] = topk_accuracy(embed_fn, episodes, k)

    script_metrics = None
    separability = None
    extras: dict = {}
    if table is not None:
        sets = build_script_sets(ds, embeddings)
        ids, matrix = script_distance_matrix(sets)
        ranking = script_ranking_eval(ids, matrix, RankingGroundTruth(table), cfg.eval.ndcg_k)
        pairs = [
            (matrix[i, j], table.level(ids[i], ids[j]))
            for i in range(len(ids))
            for j in range(i + 1, len(ids))
        ]
        rho, pval = spearman_rho(pairs)
        script_metrics = {"ndcg10": ranking.mean, "spearman_rho": rho}
        extras = {
            "ndcg_effective_k": ranking.effective_k,
            "ndcg_per_query": ranking.per_query,
            "ndcg_flagged_queries": ranking.flagged,
            "spearman_p": pval,
            "distance_matrix": {"ids": ids, "values": matrix.tolist()},
        }
        sets_by_id = {s.script_id: s for s in sets}
        if triples:
            separability = {
                f"{a}|{b}|{c}": separability_ratio(sets_by_id[a], sets_by_id[b], sets_by_id[c])
                for a, b, c in triples
            }
    report = build_report(
        glyph_metrics,
        script_metrics,
        metadata={
            "config_hash": cfg.hash,
            "seed": cfg.eval.seed,
            "tool_version": __version__,
            "checkpoint_label": label,
            "episodes": len(episodes),
            "n_way": cfg.eval.n_way,
        },
        separability=separability,
    )
    report.update(extras)
    return report


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_tree(args.data, split="evaluation")
    if ds.class_count < cfg.eval.n_way:
        raise DatasetError(
            f"evaluation data has {ds.class_count} classes; need >= {cfg.eval.n_way}"
        )
    table = None
    if args.levels:
        table = SimilarityLevelTable.from_file(args.levels)
    else:
        print("eval: no levels table given; script-level metrics skipped", file=sys.stderr)
    triples = [t.split(",") for t in (args.separability or [])]
    for t in triples:
        if len(t) != 3:
            raise ValueError(f"--separability needs a,b,c script ids, got {t}")

    rng = rng_for(cfg.eval.seed, "episodes")
    episodes = [sample_episode(ds, cfg.eval.n_way, rng) for _ in range(cfg.eval.episodes)]

    reports = {}
    for ckpt_path in args.checkpoint:
        params, _, meta = load_checkpoint(ckpt_path)
        label = f"{Path(ckpt_path).stem}:{params.role}"
        report = _eval_one(params, label, ds, episodes, cfg, table, triples)
        reports[label] = report
        write_report(out / f"report_{Path(ckpt_path).stem}.json", report)
        if "distance_matrix" in report:
            dm = report["distance_matrix"]
            export_distance_matrix_csv(
                out / f"distances_{Path(ckpt_path).stem}.csv",
                dm["ids"],
                np.array(dm["values"]),
            )
    (out / "report.txt").write_text(format_report_table(reports), encoding="utf-8")
    print(format_report_table(reports), end="")
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    reports = {}
    for path in args.inputs:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        reports[doc.get("checkpoint_label", Path(path).stem)] = doc
    text = format_report_table(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glyphsim",
        description="Glyph/script similarity: contrastive teacher + EMA self-distillation",
    )
    parser.add_argument("--config", help="JSON run configuration", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override every section seed")
    parser.add_argument("--threads", type=int, default=None, help="torch CPU threads (1 = exact replay)")
    parser.add_argument("--version", action="version", version=f"glyphsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="materialize the three splits with augmentations")
    p.add_argument("--data-root", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("render-unicode", help="rasterize codepoint ranges from fonts")
    p.add_argument("--ranges", required=True)
    p.add_argument("--fonts", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_unicode)

    p = sub.add_parser("train-teacher", help="stage 1: supervised contrastive teacher")
    p.add_argument("--data", required=True, help="prepared supervised_invented directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="stage 2: EMA self-distillation")
    p.add_argument("--data", required=True, help="prepared splits root directory")
    p.add_argument("--init", required=True, help="teacher checkpoint path, or 'random'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("embed", help="export per-script embedding stores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--expect-dim", type=int, default=None)
    p.add_argument("--centroids", action="store_true", help="one centroid per class")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="retrieval episodes + script ranking metrics")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--data", required=True, help="evaluation split directory")
    p.add_argument("--levels", default=None, help="similarity level table (TSV)")
    p.add_argument("--separability", action="append", default=None, metavar="A,B,C")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge eval reports into one table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        cfg = load_run_config(args.config, seed=args.seed)
        return args.func(args, cfg)
    except Exception as exc:  # surface a clean one-line failure, nonzero exit
        print(f"glyphsim {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
