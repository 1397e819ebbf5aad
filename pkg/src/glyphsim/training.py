"""Two training stages: contrastive teacher, then EMA self-distillation.

Stage 1 fits the encoder on labeled glyph batches with the supervised
contrastive loss. Stage 2 initializes a student and an EMA target from
the teacher (or randomly, for the from-scratch baseline), trains the
student plus a predictor head to match target representations of paired
genuine-instance views, and moves the target toward the student after
every step.

Reproducibility contract: every stochastic choice draws from an RNG
keyed by (seed, purpose, step), so a fixed seed in single-threaded mode
replays the same loss curve and final tensors bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import AugmentationParams, maybe_photometric
from .dataset import Dataset, DatasetError, sample_class_pairs, sample_supervised_batch
from .encoder import (
    EncoderConfig,
    EncoderParams,
    Predictor,
    PredictorParams,
    build_module,
    ema_update_module_,
    images_to_tensor,
    init_encoder,
    init_predictor,
    load_into_module,
    normalize_embeddings,
    snapshot,
)
from .losses import byol_loss, supcon_loss
from .util import rng_for

logger = logging.getLogger(__name__)

PREDICTOR_LR_MULTIPLIER = 2.0
VALIDATION_FRACTION = 0.1


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


class ConfigError(ValueError):
    """Raised for config values outside hard physical bounds."""


def _warn_outside(name: str, value, low, high) -> None:
    if not low <= value <= high:
        warnings.warn(
            f"{name}={value} is outside the studied range [{low}, {high}]",
            stacklevel=3,
        )


@dataclass
class Stage1Config:
    batch_size: int = 256
    base_lr: float = 1e-4
    weight_decay: float = 1e-6
    warmup_epochs: int = 10
    grad_clip: float = 1.0
    temperature: float = 0.1
    epochs: int = 150
    seed: int = 0
    val_episodes: int = 100

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 4:
            raise ConfigError(f"batch_size must be >= 4, got {self.batch_size}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.weight_decay < 0 or self.grad_clip < 0 or self.warmup_epochs < 0:
            raise ConfigError("weight_decay, grad_clip and warmup_epochs must be >= 0")
        _warn_outside("batch_size", self.batch_size, 128, 512)
        _warn_outside("temperature", self.temperature, 0.05, 0.3)
        _warn_outside("epochs", self.epochs, 50, 300)


@dataclass
class Stage2Config:
    ema_decay: float = 0.996
    predictor_hidden: int = 512
    batch_size: int = 256
    base_lr: float = 1e-4
    weight_decay: float = 1e-6
    warmup_epochs: int = 10
    grad_clip: float = 1.0
    epochs: int = 300
    init_mode: str = "teacher"
    seed: int = 0
    photometric: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must be in [0,1], got {self.ema_decay}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.init_mode not in ("teacher", "random"):
            raise ConfigError(f"init_mode must be teacher|random, got {self.init_mode!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("base_lr, weight_decay and grad_clip must be >= 0")
        _warn_outside("ema_decay", self.ema_decay, 0.95, 0.9995)
        if self.predictor_hidden not in (256, 512, 1024):
            warnings.warn(
                f"predictor_hidden={self.predictor_hidden} is outside the studied set "
                "{256, 512, 1024}",
                stacklevel=3,
            )


@dataclass
class TrainingLog:
    """Append-only per-step records plus a run summary."""

    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def append(self, **row) -> None:
        if self.records and row["step"] <= self.records[-1]["step"]:
            raise ValueError("steps must be strictly increasing")
        self.records.append(row)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if "loss" in r]

    def to_csv(self, path: Path | str) -> None:
        fields: list[str] = []
        for r in self.records:
            for k in r:
                if k not in fields:
                    fields.append(k)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(self.records)

    def write_summary(self, path: Path | str) -> None:
        Path(path).write_text(
            json.dumps(self.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def lr_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ConfigError(f"warmup_steps {warmup_steps} must be < total_steps {total_steps}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    """First/second moment accumulators for the decoupled-decay update."""

    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    lr: float,
    weight_decay: float,
    state: AdamState,
) -> AdamState:
    """One decoupled-weight-decay Adam update, in place on params.

    Decay shrinks parameters multiplicatively before the bias-corrected
    Adam delta is subtracted.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in {name!r}")
        if params[name].shape != g.shape:
            raise ConfigError(f"gradient shape mismatch for {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(state.eps), value=-lr)
    return state


def clip_gradients(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Global-norm clipping in place; max_norm <= 0 disables clipping."""
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        with torch.no_grad():
            for g in grads.values():
                g.mul_(scale)
    return total


def _named_grads(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in module.named_parameters():
        out[name] = p.grad if p.grad is not None else torch.zeros_like(p)
    return out


def holdout_class_split(ds: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ~10% of character classes for validation, deterministically."""
    classes = sorted({g.class_id for g in ds.glyphs})
    rng = rng_for(seed, "validation-split")
    order = rng.permutation(len(classes))
    n_val = int(round(VALIDATION_FRACTION * len(classes)))
    val_classes = {classes[i] for i in order[:n_val]}
    train_idx = [i for i, g in enumerate(ds.glyphs) if g.class_id not in val_classes]
    val_idx = [i for i, g in enumerate(ds.glyphs) if g.class_id in val_classes]
    return ds.subset(train_idx), ds.subset(val_idx)


def _one_shot_validation(
    module: torch.nn.Module, val_ds: Dataset, episodes: int, seed: int
) -> Optional[tuple[float, int]]:
    """Top-1 N-way retrieval on held-out classes; N capped by class count."""
    from .evaluation import sample_episode, topk_accuracy

    genuine = [i for i, g in enumerate(val_ds.glyphs) if not g.is_augmented]
    pool = val_ds.subset(genuine) if genuine else val_ds
    usable = [c for c, idxs in pool.by_class().items() if len(idxs) >= 2]
    if len(usable) < 2:
        return None
    n_way = min(20, pool.class_count)
    rng = rng_for(seed, "validation-episodes")
    eps = [sample_episode(pool, n_way, rng) for _ in range(episodes)]

    module.eval()

    def embed_fn(images: np.ndarray) -> np.ndarray:
        outs = []
        with torch.no_grad():
            x = images_to_tensor(images)
            for start in range(0, x.shape[0], 256):
                outs.append(normalize_embeddings(module(x[start : start + 256])))
        return torch.cat(outs).numpy()

    acc = topk_accuracy(embed_fn, eps, k=1)
    module.train()
    return acc, n_way


def train_stage1(
    cfg: Stage1Config, ds: Dataset, enc_cfg: EncoderConfig
) -> tuple[EncoderParams, TrainingLog]:
    """Fit the contrastive teacher on the labeled invented-script split."""
    if len(ds.glyphs) == 0:
        raise DatasetError("stage-1 dataset is empty")
    train_ds, val_ds = holdout_class_split(ds, cfg.seed)
    steps_per_epoch = max(1, len(train_ds.glyphs) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = min(cfg.warmup_epochs * steps_per_epoch, total_steps - 1)

    params = init_encoder(enc_cfg, role="teacher")
    module = load_into_module(params)
    module.train()
    named_params = dict(module.named_parameters())
    state = AdamState()
    log = TrainingLog()

    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            lr = lr_schedule(step, warmup_steps, total_steps, cfg.base_lr)
            images, labels = sample_supervised_batch(
                train_ds, cfg.batch_size, rng_for(cfg.seed, "stage1-batch", step)
            )
            x = images_to_tensor(images)
            z = normalize_embeddings(module(x))
            loss = supcon_loss(z, torch.from_numpy(labels), cfg.temperature)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            module.zero_grad(set_to_none=True)
            loss.backward()
            grads = _named_grads(module)
            grad_norm = clip_gradients(grads, cfg.grad_clip)
            optimizer_step(named_params, grads, lr, cfg.weight_decay, state)
            log.append(
                step=step,
                epoch=epoch,
                lr=lr,
                loss=float(loss),
                grad_norm=grad_norm,
                wall_clock=time.time(),
            )
            step += 1
        val = _one_shot_validation(module, val_ds, cfg.val_episodes, cfg.seed)
        if val is not None:
            acc, n_way = val
            log.summary.setdefault("validation", []).append(
                {"epoch": epoch, "top1": acc, "n_way": n_way}
            )
            logger.info("epoch %d: val %d-way top1 %.3f", epoch, n_way, acc)

    teacher = snapshot(module, role="teacher", cfg=enc_cfg)
    log.summary.update(
        {
            "stage": "stage1",
            "steps": step,
            "final_loss": log.records[-1]["loss"],
            "param_count": teacher.param_count,
            "val_classes": val_ds.class_count,
        }
    )
    return teacher, log


def collapse_probe_stats(embeddings: np.ndarray) -> dict:
    """Mean pairwise cosine and covariance-spectrum width of a probe batch."""
    n, d = embeddings.shape
    gram = embeddings @ embeddings.T
    off = gram[~np.eye(n, dtype=bool)]
    cov = np.cov(embeddings, rowvar=False)
    svals = np.linalg.svd(cov, compute_uv=False)
    top = float(svals[0]) if svals[0] > 0 else 1.0
    return {
        "mean_pairwise_cosine": float(off.mean()),
        "spectrum_above_rel_1e3": int((svals > 1e-3 * top).sum()),
        "embedding_dim": d,
    }


def _embed_probe(module: torch.nn.Module, probe: np.ndarray) -> np.ndarray:
    module.eval()
    with torch.no_grad():
        z = normalize_embeddings(module(images_to_tensor(probe)))
    module.train()
    return z.numpy()


def train_stage2(
    cfg: Stage2Config,
    ds: Dataset,
    teacher: Optional[EncoderParams],
    enc_cfg: EncoderConfig,
    aug_params: Optional[AugmentationParams] = None,
) -> tuple[EncoderParams, EncoderParams, PredictorParams, TrainingLog]:
    """Adapt to unlabeled scripts by teacher-initialized self-distillation.

    Returns (student, target, predictor, log). init_mode="random" runs the
    plain from-scratch baseline with the same machinery.
    """
    if len(ds.glyphs) == 0:
        raise DatasetError("stage-2 dataset is empty")
    if cfg.init_mode == "teacher":
        if teacher is None:
            raise ConfigError("init_mode=teacher requires a teacher checkpoint")
        if teacher.config.architecture != enc_cfg.architecture or (
            teacher.config.embedding_dim != enc_cfg.embedding_dim
        ):
            raise ConfigError(
                f"teacher architecture {teacher.config} does not match encoder config {enc_cfg}"
            )
        student_init = teacher.clone(role="student")
    else:
        student_init = init_encoder(enc_cfg, role="student")

    aug_params = aug_params or AugmentationParams()
    student = load_into_module(student_init)
    target = load_into_module(student_init.clone(role="target"))
    for p in target.parameters():
        p.requires_grad_(False)
    student.train()
    target.train()

    predictor_params = init_predictor(
        enc_cfg.embedding_dim, cfg.predictor_hidden, seed=cfg.seed
    )
    predictor = Predictor(enc_cfg.embedding_dim, cfg.predictor_hidden)
    predictor.load_state_dict(predictor_params.tensors)
    predictor.train()

    genuine_classes = {
        g.class_id for g in ds.glyphs if not g.is_augmented
    }
    n_classes = len(genuine_classes)
    steps_per_epoch = max(1, math.ceil(n_classes / cfg.batch_size))
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    warmup_steps = min(cfg.warmup_epochs * steps_per_epoch, total_steps - 1)

    probe_rng = rng_for(cfg.seed, "collapse-probe")
    all_images = ds.images_array()
    probe_n = min(256, len(all_images))
    probe = all_images[probe_rng.choice(len(all_images), size=probe_n, replace=False)]

    enc_named = dict(student.named_parameters())
    pred_named = dict(predictor.named_parameters())
    enc_state = AdamState()
    pred_state = AdamState()
    log = TrainingLog()
    probe_history: list[dict] = []

    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            lr = lr_schedule(step, warmup_steps, total_steps, cfg.base_lr)
            pairs = sample_class_pairs(
                ds, cfg.batch_size, rng_for(cfg.seed, "stage2-pairs", step), aug_params
            )
            view1 = [p[0].pixels for p in pairs]
            view2 = [p[1].pixels for p in pairs]
            if cfg.photometric:
                photo_rng = rng_for(cfg.seed, "stage2-photometric", step)
                view1 = [maybe_photometric(v, photo_rng) for v in view1]
                view2 = [maybe_photometric(v, photo_rng) for v in view2]
            v1 = images_to_tensor(np.stack(view1))
            v2 = images_to_tensor(np.stack(view2))

            p1 = predictor(normalize_embeddings(student(v1)))
            p2 = predictor(normalize_embeddings(student(v2)))
            with torch.no_grad():
                t1 = normalize_embeddings(target(v1))
                t2 = normalize_embeddings(target(v2))
            loss = byol_loss(p1, p2, t1, t2)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")

            student.zero_grad(set_to_none=True)
            predictor.zero_grad(set_to_none=True)
            loss.backward()
            enc_grads = _named_grads(student)
            pred_grads = _named_grads(predictor)
            grad_norm = clip_gradients({**enc_grads, **{f"pred.{k}": v for k, v in pred_grads.items()}}, cfg.grad_clip)
            optimizer_step(enc_named, enc_grads, lr, cfg.weight_decay, enc_state)
            optimizer_step(
                pred_named,
                pred_grads,
                lr * PREDICTOR_LR_MULTIPLIER,
                cfg.weight_decay,
                pred_state,
            )
            ema_update_module_(target, student, cfg.ema_decay)
            log.append(
                step=step,
                epoch=epoch,
                lr=lr,
                loss=float(loss),
                ema_decay=cfg.ema_decay,
                grad_norm=grad_norm,
                pairs=len(pairs),
                wall_clock=time.time(),
            )
            step += 1
        stats = collapse_probe_stats(_embed_probe(student, probe))
        stats["epoch"] = epoch
        probe_history.append(stats)

    final_probe = collapse_probe_stats(_embed_probe(student, probe))
    student_params = snapshot(student, role="student", cfg=enc_cfg)
    target_params = snapshot(target, role="target", cfg=enc_cfg)
    out_predictor = PredictorParams(
        tensors={k: v.detach().clone() for k, v in predictor.state_dict().items()},
        dim=enc_cfg.embedding_dim,
        hidden_dim=cfg.predictor_hidden,
    )
    log.summary.update(
        {
            "stage": "stage2",
            "init_mode": cfg.init_mode,
            "steps": step,
            "final_loss": log.records[-1]["loss"] if log.records else None,
            "collapse_probe": probe_history,
            "final_probe": final_probe,
        }
    )
    return student_params, target_params, out_predictor, log
