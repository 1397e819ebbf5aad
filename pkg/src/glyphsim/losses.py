"""Training objectives: supervised contrastive and prediction losses.

Conventions:
  * the contrastive loss averages per-anchor terms over the set I of
    anchors that have at least one positive; anchors outside I are
    excluded from both the numerator and the contrast (denominator) set;
  * the prediction loss is the symmetrized cosine distance between
    student predictions and stop-gradient target representations,
    averaged over the batch.
"""

from __future__ import annotations

import torch

NORM_TOLERANCE = 1e-4


class LossError(ValueError):
    """Raised when loss preconditions (positives, norms, shapes) fail."""


def _check_unit_rows(z: torch.Tensor, what: str) -> None:
    with torch.no_grad():
        err = (z.norm(dim=-1) - 1.0).abs().max()
    if float(err) > NORM_TOLERANCE:
        raise LossError(f"{what} must be unit-norm (max deviation {float(err):.2e})")


def supcon_loss(
    embeddings: torch.Tensor, labels: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Many-positive supervised contrastive loss over one labeled batch.

    embeddings: (B, d) unit rows; labels: (B,) integer class ids.
    Log-sum-exp is max-stabilized, so small temperatures are safe.
    """
    if temperature <= 0:
        raise LossError(f"temperature must be > 0, got {temperature}")
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise LossError(f"need a (B>=2, d) embedding matrix, got {tuple(embeddings.shape)}")
    if labels.shape != embeddings.shape[:1]:
        raise LossError("labels must align with embeddings")
    _check_unit_rows(embeddings, "embeddings")

    same = labels.view(-1, 1) == labels.view(1, -1)
    has_positive = (same.sum(dim=1) > 1)  # counts self; >1 means a real positive
    anchors = torch.nonzero(has_positive, as_tuple=False).squeeze(1)
    if anchors.numel() == 0:
        raise LossError("no positive pairs in batch")

    z = embeddings[anchors]
    y = labels[anchors]
    logits = (z @ z.T) / temperature
    off_diag = ~torch.eye(len(anchors), dtype=torch.bool, device=logits.device)

    # denominator over A(i) = I \ {i}
    denom = torch.logsumexp(logits.masked_fill(~off_diag, float("-inf")), dim=1)
    log_prob = logits - denom.unsqueeze(1)

    pos = (y.view(-1, 1) == y.view(1, -1)) & off_diag
    per_anchor = -(log_prob * pos).sum(dim=1) / pos.sum(dim=1)
    return per_anchor.mean()


def cosine_prediction_distance(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """2 - 2 cos(p, z) for one pair of (nonzero) vectors; range [0, 4]."""
    if p.shape != z.shape or p.ndim != 1:
        raise LossError(f"expected two equal-length vectors, got {tuple(p.shape)} vs {tuple(z.shape)}")
    pn = p.norm()
    zn = z.norm()
    if float(pn.detach()) == 0.0 or float(zn.detach()) == 0.0:
        raise LossError("zero-norm vector in cosine distance")
    return 2.0 - 2.0 * (p @ z) / (pn * zn)


def _batched_cosine_distance(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    pn = p.norm(dim=1)
    zn = z.norm(dim=1)
    if float(pn.detach().min()) == 0.0 or float(zn.detach().min()) == 0.0:
        raise LossError("zero-norm vector in prediction batch")
    cos = (p * z).sum(dim=1) / (pn * zn)
    return 2.0 - 2.0 * cos


def byol_loss(
    p1: torch.Tensor, p2: torch.Tensor, z1: torch.Tensor, z2: torch.Tensor
) -> torch.Tensor:
    """Symmetrized prediction loss, mean over the batch; range [0, 8].

    p1/p2 are student predictions for the two views, z1/z2 the target
    network's representations. z1/z2 are detached here, so no gradient
    ever reaches the target (stop-gradient contract).
    """
    shapes = {t.shape for t in (p1, p2, z1, z2)}
    if len(shapes) != 1 or p1.ndim != 2 or p1.shape[0] < 1:
        raise LossError("p1, p2, z1, z2 must share one (B'>=1, d) shape")
    z1 = z1.detach()
    z2 = z2.detach()
    return (_batched_cosine_distance(p1, z2) + _batched_cosine_distance(p2, z1)).mean()
