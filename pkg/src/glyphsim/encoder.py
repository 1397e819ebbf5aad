"""Encoder backbone, predictor head, parameter EMA and embedding.

The backbone maps a 105x105 binary raster to a unit-norm vector of
dimension d. Parameters move between two representations: live torch
modules during training, and plain named-tensor snapshots
(:class:`EncoderParams`) everywhere else (checkpoints, EMA algebra,
inference).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .glyphs import CANVAS, GlyphImage

logger = logging.getLogger(__name__)

ROLES = ("teacher", "student", "target")
NORM_KIND = "group_norm(8)"
ACTIVATION = "relu"

# channel plan for the simple_cnn backbone; stride 2 on the first conv of
# blocks 2-4, two 3x3 convs per block
_SIMPLE_CNN_CHANNELS = (64, 128, 256, 256)


class EncoderError(ValueError):
    """Raised for unknown architectures, bad dims or mismatched params."""


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "simple_cnn"
    embedding_dim: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embedding_dim <= 0:
            raise EncoderError(f"embedding_dim must be > 0, got {self.embedding_dim}")
        if self.architecture not in ("simple_cnn", "tiny_cnn"):
            raise EncoderError(f"unknown architecture {self.architecture!r}")


@dataclass
class EncoderParams:
    """Named-tensor snapshot of an encoder plus its role."""

    tensors: dict[str, torch.Tensor]
    role: str
    config: EncoderConfig

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise EncoderError(f"role must be one of {ROLES}, got {self.role!r}")
        for name, t in self.tensors.items():
            if not torch.isfinite(t).all():
                raise EncoderError(f"tensor {name!r} contains non-finite values")

    @property
    def param_count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self, role: Optional[str] = None) -> "EncoderParams":
        return EncoderParams(
            tensors={k: v.detach().clone() for k, v in self.tensors.items()},
            role=role or self.role,
            config=self.config,
        )


@dataclass
class PredictorParams:
    """Two-layer MLP head (d -> hidden -> d) as named tensors."""

    tensors: dict[str, torch.Tensor]
    dim: int
    hidden_dim: int

    def clone(self) -> "PredictorParams":
        return PredictorParams(
            {k: v.detach().clone() for k, v in self.tensors.items()},
            self.dim,
            self.hidden_dim,
        )


class SimpleCNN(nn.Module):
    """Four double-conv blocks, global average pool, linear projection."""

    def __init__(self, embedding_dim: int):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 1
        for i, cout in enumerate(_SIMPLE_CNN_CHANNELS):
            stride = 2 if i > 0 else 1
            layers += [
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.GroupNorm(8, cout),
                nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, stride=1, padding=1),
                nn.GroupNorm(8, cout),
                nn.ReLU(inplace=True),
            ]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(cin, embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        h = self.pool(h).flatten(1)
        return self.head(h)


class TinyCNN(nn.Module):
    """Small two-block backbone for smoke tests and quick experiments."""

    def __init__(self, embedding_dim: int):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1),
            nn.GroupNorm(4, 16),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.GroupNorm(4, 32),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(32, embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        h = self.pool(h).flatten(1)
        return self.head(h)


class Predictor(nn.Module):
    """Prediction MLP applied to backbone embeddings (output unnormalized)."""

    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.ReLU(inplace=True)
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, z: torch.Tensor, linear_only: bool = False) -> torch.Tensor:
        h = self.fc1(z)
        if not linear_only:
            h = self.act(h)
        return self.fc2(h)


def build_module(cfg: EncoderConfig) -> nn.Module:
    if cfg.architecture == "tiny_cnn":
        return TinyCNN(cfg.embedding_dim)
    return SimpleCNN(cfg.embedding_dim)


def _deterministic_init_(module: nn.Module, seed: int) -> None:
    """He-uniform weights, zero biases, unit norm scales; local generator."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.GroupNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def init_encoder(cfg: EncoderConfig, role: str = "teacher") -> EncoderParams:
    """Deterministically initialized parameters for the given architecture."""
    module = build_module(cfg)
    _deterministic_init_(module, cfg.seed)
    tensors = {k: v.detach().clone() for k, v in module.state_dict().items()}
    params = EncoderParams(tensors=tensors, role=role, config=cfg)
    logger.info(
        "initialized %s (d=%d, seed=%d): %d parameters",
        cfg.architecture,
        cfg.embedding_dim,
        cfg.seed,
        params.param_count,
    )
    return params


def init_predictor(dim: int, hidden_dim: int, seed: int) -> PredictorParams:
    module = Predictor(dim, hidden_dim)
    _deterministic_init_(module, seed)
    tensors = {k: v.detach().clone() for k, v in module.state_dict().items()}
    return PredictorParams(tensors=tensors, dim=dim, hidden_dim=hidden_dim)


def load_into_module(params: EncoderParams, module: Optional[nn.Module] = None) -> nn.Module:
    module = module or build_module(params.config)
    module.load_state_dict(params.tensors)
    return module


def snapshot(module: nn.Module, role: str, cfg: EncoderConfig) -> EncoderParams:
    tensors = {k: v.detach().clone() for k, v in module.state_dict().items()}
    return EncoderParams(tensors=tensors, role=role, config=cfg)


def images_to_tensor(images: Sequence[GlyphImage] | np.ndarray) -> torch.Tensor:
    """Stack rasters into a float32 (N, 1, 105, 105) batch."""
    if isinstance(images, np.ndarray):
        arr = images
    else:
        arr = np.stack([g.pixels for g in images])
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[-2:] != (CANVAS, CANVAS):
        raise EncoderError(f"expected {CANVAS}x{CANVAS} rasters, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr)).float().unsqueeze(1)


def normalize_embeddings(feats: torch.Tensor) -> torch.Tensor:
    """l2-normalize rows; zero rows map to the first basis vector.

    The fallback keeps batch evaluation total when a degenerate weight
    set produces an exactly-zero feature vector.
    """
    norms = feats.norm(dim=1, keepdim=True)
    zero = norms.squeeze(1) == 0
    z = feats / norms.clamp_min(torch.finfo(feats.dtype).tiny)
    if bool(zero.any()):
        logger.warning("%d zero-norm feature vectors replaced by basis vector", int(zero.sum()))
        basis = torch.zeros_like(feats[0])
        basis[0] = 1.0
        z = torch.where(zero.unsqueeze(1), basis.expand_as(feats), z)
    return z


def embed(
    params: EncoderParams,
    images: Sequence[GlyphImage] | np.ndarray,
    batch_size: int = 256,
    module: Optional[nn.Module] = None,
) -> np.ndarray:
    """Map rasters to unit-norm embeddings, batched, inference mode."""
    module = load_into_module(params, module)
    module.eval()
    x = images_to_tensor(images)
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            feats = module(x[start : start + batch_size])
            outs.append(normalize_embeddings(feats))
    return torch.cat(outs).numpy()


def predictor_forward(
    params: PredictorParams,
    z: np.ndarray | torch.Tensor,
    linear_only: bool = False,
) -> np.ndarray:
    """Run the prediction MLP on one vector or a batch (no normalization)."""
    arr = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    single = arr.ndim == 1
    if single:
        arr = arr.unsqueeze(0)
    if arr.shape[1] != params.dim:
        raise EncoderError(f"predictor expects dim {params.dim}, got {arr.shape[1]}")
    module = Predictor(params.dim, params.hidden_dim)
    module.load_state_dict(params.tensors)
    module.eval()
    with torch.no_grad():
        out = module(arr, linear_only=linear_only)
    result = out.numpy()
    return result[0] if single else result


def _ema_tensors_(
    target: dict[str, torch.Tensor], student: dict[str, torch.Tensor], decay: float
) -> None:
    if not 0.0 <= decay <= 1.0:
        raise EncoderError(f"ema decay must be in [0,1], got {decay}")
    if target.keys() != student.keys():
        raise EncoderError("target/student tensor names differ")
    with torch.no_grad():
        for name, t in target.items():
            s = student[name]
            if t.shape != s.shape:
                raise EncoderError(f"shape mismatch for {name!r}: {t.shape} vs {s.shape}")
            t.mul_(decay).add_(s, alpha=1.0 - decay)


def ema_update(target: EncoderParams, student: EncoderParams, decay: float) -> EncoderParams:
    """Exponential moving average: every tensor moves toward the student.

    Returns a new parameter set; inputs are untouched.
    """
    same_arch = (
        target.config.architecture == student.config.architecture
        and target.config.embedding_dim == student.config.embedding_dim
    )
    if not same_arch:
        raise EncoderError("target/student architectures differ")
    out = target.clone()
    _ema_tensors_(out.tensors, student.tensors, decay)
    return out


def ema_update_module_(target: nn.Module, student: nn.Module, decay: float) -> None:
    """In-place EMA between live modules (training hot path)."""
    _ema_tensors_(
        dict(target.state_dict()), dict(student.state_dict()), decay
    )
