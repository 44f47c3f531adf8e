"""Supervised contrastive loss over a batch of unit-norm embeddings, with its gradient.

For anchor i with positives P(i) (same label, i excluded) and A(i) = every
other index::

    L = sum_{i: |P(i)|>0} -1/|P(i)| sum_{p in P(i)} log( exp(z_i.z_p/t) / sum_{a in A(i)} exp(z_i.z_a/t) )

Anchors without positives contribute nothing. There is no 1/|I| factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_TOLERANCE = 1e-9


class ContrastiveInputError(ValueError):
    """Raised when a batch violates the loss preconditions."""


@dataclass(frozen=True, eq=False)
class ContrastiveBatch:
    embeddings: np.ndarray
    labels: np.ndarray
    temperature: float = 0.1

    def __post_init__(self) -> None:
        z = np.asarray(self.embeddings, dtype=np.float64)
        y = np.asarray(self.labels).reshape(-1)
        _check_shapes(z, y, self.temperature)
        norms = np.linalg.norm(z, axis=1)
        off = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOLERANCE)
        if off.size:
            raise ContrastiveInputError(
                f"row {off[0]} has norm {norms[off[0]]:.12g}; embeddings must be unit-norm"
            )
        object.__setattr__(self, "embeddings", z)
        object.__setattr__(self, "labels", y)


def logsumexp_stable(scores: np.ndarray) -> float:
    """log(sum(exp(scores))) with a max shift."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("logsumexp of an empty vector")
    shift = s.max()
    return float(shift + np.log(np.sum(np.exp(s - shift))))


def supcon_objective(
    embeddings: np.ndarray, labels: np.ndarray, temperature: float,
) -> tuple[float, np.ndarray]:
    """Loss value and dL/dz treating every row as a free vector.

    No norm check; ``supcon_loss``/``supcon_grad`` validate first.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    _check_shapes(z, y, temperature)
    B = z.shape[0]

    scores = (z @ z.T) / temperature
    off_diag = ~np.eye(B, dtype=bool)
    positives = (y[:, None] == y[None, :]) & off_diag
    n_pos = positives.sum(axis=1)
    active = n_pos > 0

    masked = np.where(off_diag, scores, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    exp = np.where(off_diag, np.exp(masked - row_max), 0.0)
    denom = exp.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(denom[:, 0])

    pos_scores = np.where(positives, scores, 0.0).sum(axis=1)
    per_anchor = np.zeros(B)
    per_anchor[active] = lse[active] - pos_scores[active] / n_pos[active]
    loss = float(per_anchor.sum())

    # dL/dscores for active anchors: softmax over A(i) minus positive mask / |P(i)|
    weights = np.zeros((B, B))
    softmax = exp / denom
    weights[active] = softmax[active] - positives[active] / n_pos[active, None]
    grad = (weights + weights.T) @ z / temperature
    return loss, grad


def supcon_loss(batch: ContrastiveBatch) -> float:
    loss, _ = supcon_objective(batch.embeddings, batch.labels, batch.temperature)
    return loss


def supcon_grad(batch: ContrastiveBatch) -> np.ndarray:
    """dL/dz, before any projection back onto the unit sphere."""
    _, grad = supcon_objective(batch.embeddings, batch.labels, batch.temperature)
    return grad


def _check_shapes(z: np.ndarray, y: np.ndarray, temperature: float) -> None:
    if z.ndim != 2:
        raise ContrastiveInputError(f"embeddings must be a matrix, got shape {z.shape}")
    if z.shape[0] < 2:
        raise ContrastiveInputError("batch needs at least 2 rows so every anchor has A(i)")
    if y.shape[0] != z.shape[0]:
        raise ContrastiveInputError(f"{z.shape[0]} embeddings but {y.shape[0]} labels")
    if not temperature > 0:
        raise ContrastiveInputError(f"temperature must be positive, got {temperature}")
