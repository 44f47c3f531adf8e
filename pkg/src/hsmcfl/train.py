"""Two-stage HSMCFL training: contrastive encoder, then classifier on frozen features.

Stage 1 trains encoder + projection head with the supervised contrastive loss
on HSM batches, refreshing the similarity view from the encoder at every
stage after the first. Stage 2 freezes the encoder and trains the classifier
with softmax cross-entropy; after each stage the misclassified training
samples seed the next stage's batch initialization.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn

from .config import LABEL_COLUMN_NAME
from .dataio import FLOAT_FORMAT, DataError, Dataset
from .hsm import MiniBatch, MiningError, build_batches, refresh_view, uniform_batches
from .metrics import MetricsError, evaluate_predictions
from .models import (
    AblationFlags,
    Activation,
    CellSummary,
    ExperimentReport,
    MetricsBundle,
    MinerConfig,
    SplitTag,
    Stage,
    TrainConfig,
    TrainReport,
)
from .nn import (
    Network,
    NonFiniteGradientError,
    OptimizerState,
    ShapeError,
    backward,
    forward,
    identity_network,
    init_network,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    layer_stack,
    optimizer_step,
)
from .supcon import ContrastiveBatch, ContrastiveInputError, supcon_objective

logger = logging.getLogger(__name__)

CELLS = ("HSMCFL", "HSM+CFL-MLP", "CFL-HSM+MLP", "CFL-MLP")
BASELINE_CELL = "MLP"

# Sub-seeds are fixed offsets from the root seed
SEED_ENCODER = 1
SEED_PROJECTION = 2
SEED_CLASSIFIER = 3
SEED_AUGMENT = 4
SEED_CFL_BATCHES = 100
SEED_MLP_BATCHES = 200

_STEP_ERRORS = (ShapeError, ContrastiveInputError, NonFiniteGradientError, MiningError)


class TrainingError(Exception):
    """A training step failed; the message names stage, epoch and batch."""


def no_augmentation(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return x


AUGMENTATIONS: dict[str, Callable[[np.ndarray, np.random.Generator], np.ndarray]] = {
    "none": no_augmentation,
}


@dataclass(frozen=True, eq=False)
class ContrastiveEncoder:
    """Encoder f and the projection head used only by the contrastive loss."""

    encoder: Network
    projection: Network | None = None


@dataclass(frozen=True, eq=False)
class CflResult:
    model: ContrastiveEncoder
    loss_trace: list[list[float]]


@dataclass(frozen=True, eq=False)
class PipelineResult:
    model: ContrastiveEncoder
    classifier: Network
    report: TrainReport


def build_contrastive_encoder(cfg: TrainConfig, feature_count: int) -> ContrastiveEncoder:
    arch = cfg.architecture
    enc_dims = [feature_count, *arch.encoder_hidden]
    encoder = init_network(
        layer_stack(enc_dims, [Activation.RELU] * (len(enc_dims) - 1)),
        cfg.seed + SEED_ENCODER,
    )
    projection = init_network(
        layer_stack([enc_dims[-1], arch.projection_dim], [Activation.IDENTITY]),
        cfg.seed + SEED_PROJECTION,
    )
    return ContrastiveEncoder(encoder, projection)


def build_classifier(cfg: TrainConfig, in_dim: int, class_count: int) -> Network:
    dims = [in_dim, *cfg.architecture.classifier_hidden, class_count]
    acts = [Activation.RELU] * (len(dims) - 2) + [Activation.IDENTITY]
    return init_network(layer_stack(dims, acts), cfg.seed + SEED_CLASSIFIER)


def miner_config(cfg: TrainConfig, seed: int) -> MinerConfig:
    """The miner settings with the training batch size and a per-stage seed."""
    return cfg.miner.model_copy(update={"batch_size": cfg.batch_size, "seed": seed})


def _training_rows(ds: Dataset) -> Dataset:
    return ds.subset(SplitTag.TRAIN) if ds.split_assignment is not None else ds


def _check_batch_fits(train: Dataset, cfg: TrainConfig) -> None:
    if cfg.epochs > 0 and len(train) < cfg.batch_size:
        raise TrainingError(
            f"training split has {len(train)} samples, fewer than batch_size {cfg.batch_size}"
        )


def _progress(enabled: bool) -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TaskProgressColumn(),
        disable=not enabled,
    )


# --- Stage 1: contrastive feature learning ---


def train_cfl(ds: Dataset, cfg: TrainConfig, show_progress: bool = False) -> CflResult:
    """Train encoder + projection with supervised contrastive loss; deterministic per seed."""
    train = _training_rows(ds)
    _check_batch_fits(train, cfg)
    model = build_contrastive_encoder(cfg, train.feature_count)
    encoder, projection = model.encoder, model.projection
    enc_state = OptimizerState.for_network(encoder, cfg.learning_rate, cfg.optimizer)
    proj_state = OptimizerState.for_network(projection, cfg.learning_rate, cfg.optimizer)
    augment = AUGMENTATIONS[cfg.augmentation]
    aug_rng = np.random.default_rng(cfg.seed + SEED_AUGMENT)
    stages = cfg.effective_cfl_stages

    trace: list[list[float]] = []
    with _progress(show_progress) as progress:
        task = progress.add_task("Contrastive training", total=stages * cfg.epochs)
        for stage in range(stages):
            stage_seed = cfg.seed + SEED_CFL_BATCHES + stage
            shuffle_rng = np.random.default_rng(stage_seed)
            hard_batches: list[MiniBatch] | None = None
            if cfg.ablation.hsm_in_cfl:
                view_stage = Stage.CFL if stage == 0 else Stage.MLP
                try:
                    view = refresh_view(encoder, train, view_stage)
                    hard_batches = build_batches(view, miner_config(cfg, stage_seed))
                except _STEP_ERRORS as exc:
                    raise TrainingError(f"CFL stage {stage + 1}: {exc}") from exc
                logger.debug("CFL stage %d: %d HSM batches", stage + 1, len(hard_batches))

            stage_losses = []
            for epoch in range(cfg.epochs):
                batches = hard_batches if hard_batches is not None else uniform_batches(
                    len(train), cfg.batch_size, shuffle_rng,
                )
                losses = []
                for b, batch in enumerate(batches):
                    x = augment(train.features[batch.indices], aug_rng)
                    y = train.labels[batch.indices]
                    try:
                        loss, encoder, projection, enc_state, proj_state = _cfl_step(
                            encoder, projection, enc_state, proj_state, x, y, cfg.temperature,
                        )
                    except _STEP_ERRORS as exc:
                        raise TrainingError(
                            f"CFL stage {stage + 1} epoch {epoch + 1} batch {b + 1}: {exc}"
                        ) from exc
                    losses.append(loss)
                stage_losses.append(float(np.mean(losses)))
                progress.update(task, advance=1)
            trace.append(stage_losses)
            if stage_losses:
                logger.info("CFL stage %d/%d: last epoch loss %.6f", stage + 1, stages, stage_losses[-1])

    return CflResult(ContrastiveEncoder(encoder, projection), trace)


def _cfl_step(encoder, projection, enc_state, proj_state, x, y, temperature):
    enc_cache = forward(encoder, x)
    proj_cache = forward(projection, enc_cache.output)
    raw = proj_cache.output
    z, zero = l2_normalize_rows(raw)
    if zero.any():
        raise ContrastiveInputError("projection head produced an all-zero embedding")
    batch = ContrastiveBatch(z, y, temperature)
    loss, grad_z = supcon_objective(batch.embeddings, batch.labels, batch.temperature)

    proj_grads = backward(projection, proj_cache, l2_normalize_rows_backward(raw, grad_z))
    enc_grads = backward(encoder, enc_cache, proj_grads.inputs)
    projection, proj_state = optimizer_step(projection, proj_grads, proj_state)
    encoder, enc_state = optimizer_step(encoder, enc_grads, enc_state)
    return loss, encoder, projection, enc_state, proj_state


# --- Stage 2: classifier on frozen representations ---


def train_classifier(
    ds: Dataset,
    encoder: Network,
    cfg: TrainConfig,
    show_progress: bool = False,
) -> tuple[Network, TrainReport]:
    """Train g on encoder outputs; the encoder is only read, never updated."""
    train = _training_rows(ds)
    _check_batch_fits(train, cfg)
    if encoder.in_dim != train.feature_count:
        raise TrainingError(
            f"encoder expects {encoder.in_dim} features, dataset has {train.feature_count}"
        )
    features = forward(encoder, train.features).output
    classifier = build_classifier(cfg, encoder.out_dim, train.class_count)
    state = OptimizerState.for_network(classifier, cfg.learning_rate, cfg.optimizer)
    stages = cfg.effective_mlp_stages

    val = None
    if cfg.early_stopping:
        if ds.split_assignment is not None and ds.indices(SplitTag.VAL).size:
            val = ds.subset(SplitTag.VAL)
        else:
            logger.warning("early stopping requested but no validation split; disabled")
    best_score, best_classifier, stale = -1.0, classifier, 0

    # Frozen encoder: the mlp-stage view is identical at every stage.
    view = refresh_view(encoder, train, Stage.MLP) if cfg.ablation.hsm_in_mlp else None
    mis_samples = np.array([], dtype=np.int64)
    trace: list[list[float]] = []
    pool_sizes: list[int] = []

    with _progress(show_progress) as progress:
        task = progress.add_task("Classifier training", total=stages * cfg.epochs)
        for stage in range(stages):
            stage_seed = cfg.seed + SEED_MLP_BATCHES + stage
            shuffle_rng = np.random.default_rng(stage_seed)
            hard_batches: list[MiniBatch] | None = None
            if view is not None:
                try:
                    hard_batches = build_batches(view, miner_config(cfg, stage_seed), init_pool=mis_samples)
                except _STEP_ERRORS as exc:
                    raise TrainingError(f"MLP stage {stage + 1}: {exc}") from exc

            stage_losses = []
            for epoch in range(cfg.epochs):
                batches = hard_batches if hard_batches is not None else uniform_batches(
                    len(train), cfg.batch_size, shuffle_rng,
                )
                losses = []
                for b, batch in enumerate(batches):
                    try:
                        loss, classifier, state = _classifier_step(
                            classifier, state,
                            features[batch.indices], train.labels[batch.indices],
                        )
                    except _STEP_ERRORS as exc:
                        raise TrainingError(
                            f"MLP stage {stage + 1} epoch {epoch + 1} batch {b + 1}: {exc}"
                        ) from exc
                    losses.append(loss)
                stage_losses.append(float(np.mean(losses)))
                progress.update(task, advance=1)
            trace.append(stage_losses)

            wrong = misclassified(classifier, features, train.labels)
            if view is not None:
                mis_samples = wrong
            pool_sizes.append(int(wrong.size))
            logger.info("MLP stage %d/%d: %d misclassified training samples",
                        stage + 1, stages, pool_sizes[-1])

            if val is not None:
                score = evaluate_split(encoder, classifier, val).macro_gmean
                if score > best_score:
                    best_score, best_classifier, stale = score, classifier, 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        logger.info("Early stop after MLP stage %d (val macro G-mean %.4f)",
                                    stage + 1, best_score)
                        break

    if val is not None:
        classifier = best_classifier
    report = TrainReport(
        cell=cfg.ablation.cell,
        seed=cfg.seed,
        mlp_loss=trace,
        misclassified_pool_sizes=pool_sizes,
    )
    return classifier, report


def _classifier_step(classifier, state, x, y):
    cache = forward(classifier, x)
    logits = cache.output
    if logits.shape != (x.shape[0], classifier.out_dim):
        raise ShapeError(f"logits shaped {logits.shape}", layer=len(classifier.layers) - 1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(y.size)
    loss = float(-log_probs[rows, y].mean())

    grad = np.exp(log_probs)
    grad[rows, y] -= 1.0
    grad /= y.size
    grads = backward(classifier, cache, grad)
    classifier, state = optimizer_step(classifier, grads, state)
    return loss, classifier, state


def misclassified(classifier: Network, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Indices whose argmax prediction differs from the label."""
    predictions = np.argmax(forward(classifier, features).output, axis=1)
    return np.flatnonzero(predictions != labels)


def predict(encoder: Network, classifier: Network, x: np.ndarray) -> np.ndarray:
    return np.argmax(classifier(encoder(x)), axis=1)


def evaluate_split(encoder: Network, classifier: Network, ds: Dataset) -> MetricsBundle:
    return evaluate_predictions(ds.labels, predict(encoder, classifier, ds.features), ds.class_count)


# --- Full pipeline and experiments ---


def run_pipeline(ds: Dataset, cfg: TrainConfig, show_progress: bool = False) -> PipelineResult:
    """Both stages plus validation/test metrics when the dataset is split."""
    seconds: dict[str, float] = {}
    started = time.perf_counter()
    if cfg.ablation.use_cfl:
        cfl = train_cfl(ds, cfg, show_progress)
        model, cfl_trace = cfl.model, cfl.loss_trace
    else:
        model, cfl_trace = ContrastiveEncoder(identity_network(ds.feature_count)), []
    seconds["cfl"] = time.perf_counter() - started

    started = time.perf_counter()
    classifier, report = train_classifier(ds, model.encoder, cfg, show_progress)
    seconds["mlp"] = time.perf_counter() - started

    metrics: dict[str, MetricsBundle | None] = {"val": None, "test": None}
    if ds.split_assignment is not None:
        for tag in (SplitTag.VAL, SplitTag.TEST):
            if ds.indices(tag).size:
                try:
                    metrics[tag.value] = evaluate_split(model.encoder, classifier, ds.subset(tag))
                except MetricsError as exc:
                    raise TrainingError(f"{tag.value} metrics: {exc}") from exc

    report = report.model_copy(update={
        "cfl_loss": cfl_trace,
        "val": metrics["val"],
        "test": metrics["test"],
        "stage_seconds": seconds,
    })
    return PipelineResult(model, classifier, report)


def run_experiment(
    ds: Dataset,
    cfg: TrainConfig,
    repeats: int,
    cells: list[str] | tuple[str, ...] | None = None,
    show_progress: bool = False,
) -> ExperimentReport:
    """Repeat the pipeline with seeds seed+0..seed+repeats-1 for each cell.

    Cells default to the one named by ``cfg.ablation``; summaries follow cell
    order, runs within a cell follow seed order.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be at least 1, got {repeats}")
    if ds.split_assignment is None or not ds.indices(SplitTag.TEST).size:
        raise DataError("experiments need a dataset with a non-empty test split")

    summaries = []
    for cell in cells or [cfg.ablation.cell]:
        flags = AblationFlags.for_cell(cell)
        runs = []
        for r in range(repeats):
            run_cfg = cfg.model_copy(update={"seed": cfg.seed + r, "ablation": flags})
            logger.info("Cell %s, seed %d", cell, run_cfg.seed)
            runs.append(run_pipeline(ds, run_cfg, show_progress).report)
        summaries.append(summarize(cell, runs))
    return ExperimentReport(cells=summaries)


def summarize(cell: str, runs: list[TrainReport]) -> CellSummary:
    """Mean and population standard deviation of test metrics."""
    acc = np.array([run.test.accuracy for run in runs])
    gm = np.array([run.test.macro_gmean for run in runs])
    return CellSummary(
        cell=cell,
        seeds=[run.seed for run in runs],
        accuracy_mean=float(acc.mean()),
        accuracy_std=float(acc.std()),
        macro_gmean_mean=float(gm.mean()),
        macro_gmean_std=float(gm.std()),
        runs=runs,
    )


def export_embeddings(
    encoder: Network, ds: Dataset, path: Path, split: SplitTag | None = None,
) -> Path:
    """CSV of encoder outputs (columns e0..) plus the label column."""
    rows = ds.indices(split) if split is not None else np.arange(len(ds))
    if encoder.in_dim != ds.feature_count:
        raise ShapeError(
            f"encoder expects {encoder.in_dim} features, dataset has {ds.feature_count}", layer=0,
        )
    embeddings = forward(encoder, ds.features[rows]).output
    frame = pd.DataFrame(embeddings, columns=[f"e{j}" for j in range(encoder.out_dim)])
    frame[LABEL_COLUMN_NAME] = ds.labels[rows]
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path
