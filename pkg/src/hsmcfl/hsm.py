"""Hard-sample-mining mini-batch construction over cosine similarity.

Each batch starts from one random sample per class (or one misclassified
sample when a pool is given) and grows until it holds ``batch_size`` indices:
with probability ``p_random`` a random dataset index is appended, otherwise a
random anchor already in the batch contributes its hard positive (same label,
lowest similarity) and hard negative (other label, highest similarity).
Mining scans the whole view unless a candidate pool size is configured.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError
from .dataio import Dataset
from .models import MinerConfig, Provenance, Stage
from .nn import Network, ShapeError, forward, l2_normalize_rows

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-9


class MiningError(Exception):
    """Raised when a batch cannot be mined from the view."""


class NoCandidateError(MiningError):
    """No sample satisfies the label condition for the anchor."""


@dataclass(frozen=True, eq=False)
class SimilarityView:
    """Unit rows aligned with the training set; all-zero rows are allowed and score 0."""

    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if vectors.ndim != 2 or vectors.shape[0] != labels.shape[0]:
            raise ShapeError(
                f"view has vectors {vectors.shape} and {labels.shape[0]} labels"
            )
        norms = np.linalg.norm(vectors, axis=1)
        bad = np.flatnonzero((np.abs(norms - 1.0) > NORM_TOLERANCE) & (norms != 0.0))
        if bad.size:
            raise MiningError(f"view row {bad[0]} is not unit-norm ({norms[bad[0]]:.12g})")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.size)

    def similarities(self, anchor: int) -> np.ndarray:
        return self.vectors @ self.vectors[anchor]


@dataclass(eq=False)
class MiniBatch:
    """Indices into the training set with the reason each one was added."""

    indices: list[int] = field(default_factory=list)
    provenance: list[Provenance] = field(default_factory=list)
    anchors: list[int | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.indices)

    def append(self, index: int, provenance: Provenance, anchor: int | None = None) -> None:
        self.indices.append(int(index))
        self.provenance.append(provenance)
        self.anchors.append(anchor)

    def to_json(self) -> dict:
        return {
            "indices": self.indices,
            "provenance": [p.value for p in self.provenance],
            "anchors": self.anchors,
        }


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def hard_negative(
    view: SimilarityView,
    anchor: int,
    exclude: Iterable[int] | None = None,
    candidates: np.ndarray | None = None,
) -> int:
    """Most similar sample with a different label; ties go to the lowest index."""
    mask = view.labels != view.labels[anchor]
    idx = _eligible(view, mask, anchor, exclude, candidates, "a different label")
    return int(idx[np.argmax(view.similarities(anchor)[idx])])


def hard_positive(
    view: SimilarityView,
    anchor: int,
    exclude: Iterable[int] | None = None,
    candidates: np.ndarray | None = None,
) -> int:
    """Least similar other sample with the anchor's label; ties go to the lowest index."""
    mask = view.labels == view.labels[anchor]
    idx = _eligible(view, mask, anchor, exclude, candidates, "the same label")
    return int(idx[np.argmin(view.similarities(anchor)[idx])])


def _eligible(view, mask, anchor, exclude, candidates, what: str) -> np.ndarray:
    mask = mask.copy()
    mask[anchor] = False
    if candidates is not None:
        in_pool = np.zeros_like(mask)
        in_pool[candidates] = True
        mask &= in_pool
    if exclude is not None:
        mask[list(exclude)] = False
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise NoCandidateError(f"no sample with {what} as anchor {anchor}")
    return idx


def build_batches(
    view: SimilarityView,
    cfg: MinerConfig,
    init_pool: Iterable[int] | None = None,
) -> list[MiniBatch]:
    """Build len(view) // batch_size hard-sample batches, deterministic per ``cfg.seed``."""
    pool = np.unique(np.asarray([] if init_pool is None else list(init_pool), dtype=np.int64))
    classes = np.unique(view.labels)
    n, bs = len(view), cfg.batch_size
    if pool.size == 0 and bs < classes.size:
        raise ConfigError(
            f"batch_size {bs} cannot hold one initial sample for each of {classes.size} classes"
        )
    if n // bs == 0:
        logger.warning("view holds %d samples, fewer than batch_size %d; no batches built", n, bs)

    rng = np.random.default_rng(cfg.seed)
    members = {int(c): np.flatnonzero(view.labels == c) for c in classes}

    batches = []
    for _ in range(n // bs):
        batch = MiniBatch()
        if pool.size:
            batch.append(int(rng.choice(pool)), Provenance.INIT)
        else:
            for c in classes:
                batch.append(int(rng.choice(members[int(c)])), Provenance.INIT)

        while len(batch) < bs:
            if rng.random() < cfg.p_random:
                batch.append(int(rng.integers(n)), Provenance.RANDOM)
                continue
            anchor = batch.indices[int(rng.integers(len(batch)))]
            candidates = None
            if cfg.candidate_pool is not None and cfg.candidate_pool < n:
                candidates = np.sort(rng.choice(n, size=cfg.candidate_pool, replace=False))
            exclude = batch.indices if cfg.exclude_in_batch else None

            try:
                positive = _mine(hard_positive, view, anchor, exclude, candidates)
                batch.append(positive, Provenance.HARD_POS, anchor)
            except NoCandidateError:
                # singleton class: the anchor has no partner to pull toward
                batch.append(int(rng.integers(n)), Provenance.RANDOM)
            if len(batch) >= bs:
                break
            negative = _mine(hard_negative, view, anchor, exclude, candidates)
            batch.append(negative, Provenance.HARD_NEG, anchor)
        batches.append(batch)
    return batches


def _mine(
    pick: Callable[..., int],
    view: SimilarityView,
    anchor: int,
    exclude: list[int] | None,
    candidates: np.ndarray | None,
) -> int:
    """Try the restricted scan first and widen it when nothing qualifies."""
    attempts = [(exclude, candidates)]
    if candidates is not None:
        attempts.append((exclude, None))
    if exclude is not None:
        attempts.append((None, None))
    for excl, cand in attempts[:-1]:
        try:
            return pick(view, anchor, exclude=excl, candidates=cand)
        except NoCandidateError:
            continue
    excl, cand = attempts[-1]
    return pick(view, anchor, exclude=excl, candidates=cand)


def uniform_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[MiniBatch]:
    """n // batch_size batches drawn without replacement, all tagged random."""
    order = rng.permutation(n)
    batches = []
    for k in range(n // batch_size):
        batch = MiniBatch()
        for i in order[k * batch_size:(k + 1) * batch_size]:
            batch.append(int(i), Provenance.RANDOM)
        batches.append(batch)
    return batches


def refresh_view(encoder: Network | None, ds: Dataset, stage: Stage) -> SimilarityView:
    """Similarity space for mining: raw features for ``cfl``, encoder outputs for ``mlp``."""
    if stage == Stage.CFL:
        vectors = ds.features
    else:
        if encoder is None:
            raise ValueError("an encoder is required for the mlp-stage view")
        if encoder.in_dim != ds.feature_count:
            raise ShapeError(
                f"encoder expects {encoder.in_dim} features, dataset has {ds.feature_count}",
                layer=0,
            )
        vectors = forward(encoder, ds.features).output
    rows, zero = l2_normalize_rows(vectors)
    if zero.any():
        logger.warning("%d all-zero rows in the %s view score 0 against every sample",
                       int(zero.sum()), Stage(stage).value)
    return SimilarityView(rows, ds.labels)


def dump_batches(batches: list[MiniBatch], path: Path) -> Path:
    """Write one JSON object per batch."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for batch in batches:
            f.write(json.dumps(batch.to_json()) + "\n")
    return path
