"""CLI entry point and run orchestration."""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import sys
import time
from collections.abc import Callable
from datetime import datetime
from pathlib import Path

import click
import numpy as np
import pandas as pd
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from .config import ConfigError, default_log_level, default_output_dir, load_config, validate_path
from .dataio import (
    DataError,
    Dataset,
    NormStats,
    apply_minmax,
    dataset_meta,
    export_dataset,
    generate_synthetic,
    load_csv,
    load_dataset,
    meta_path,
    normalize_minmax,
    read_meta,
    split,
)
from .hsm import MiningError, build_batches, dump_batches, refresh_view
from .metrics import ConfusionMatrix, MetricsError, write_confusion_csv
from .models import (
    CsvSchema,
    ExperimentConfig,
    ExperimentReport,
    RunManifest,
    SplitTag,
    Stage,
    StageStatusEnum,
)
from .nn import CheckpointError, ShapeError, load_checkpoint, save_checkpoint
from .train import (
    BASELINE_CELL,
    CELLS,
    SEED_CFL_BATCHES,
    TrainingError,
    evaluate_split,
    export_embeddings,
    miner_config,
    run_experiment,
    run_pipeline,
)

console = Console()
logger = logging.getLogger("hsmcfl")

DATASET_FILE = "dataset.csv"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.json"
SPLIT_FILE = "split.json"
ENCODER_CKPT = "encoder.ckpt"
CLASSIFIER_CKPT = "classifier.ckpt"
EMBEDDINGS_FILE = "embeddings.csv"
METRICS_FILE = "metrics.json"
ABLATION_TABLE = "ablation_table.csv"
ABLATION_REPORT = "ablation.json"
BATCHES_FILE = "batches.jsonl"

TRAIN_ARTIFACTS = (
    ENCODER_CKPT,
    CLASSIFIER_CKPT,
    REPORT_FILE,
    "confusion_test.csv",
    EMBEDDINGS_FILE,
    SPLIT_FILE,
)

HANDLED_ERRORS = (
    ConfigError,
    DataError,
    TrainingError,
    CheckpointError,
    MetricsError,
    MiningError,
    ShapeError,
)


def _exit_on_error(func: Callable) -> Callable:
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except HANDLED_ERRORS as e:
            console.print(f"[red]Error:[/red] {escape(str(e))}")
            logger.debug("Full traceback:", exc_info=True)
            sys.exit(1)
    return wrapper


def _config_options(func: Callable) -> Callable:
    func = click.option(
        "--out", "-o", "out", type=click.Path(), default=None,
        help="Output directory (default: $HSMCFL_OUTPUT_DIR or ./output)",
    )(func)
    func = click.option(
        "--override", "overrides", multiple=True,
        help="key=value config override; repeatable, comma-separated lists allowed",
    )(func)
    func = click.option(
        "--config", "-c", "config_path", type=click.Path(), default=None,
        help="Experiment config file (.toml or .json)",
    )(func)
    return func


@click.group()
@click.option("--verbose", is_flag=True, help="Enable verbose logging")
def main(verbose: bool) -> None:
    """Hard-sample-mining contrastive feature learning for fault diagnosis."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else default_log_level(),
        format="%(levelname)s: %(message)s",
    )


# --- generate ---


@main.command()
@_config_options
@click.option("--seed", type=int, default=None, help="Synthetic data seed")
@_exit_on_error
def generate(config_path: str | None, overrides: tuple[str, ...], out: str | None, seed: int | None) -> None:
    """Write a synthetic drifting, imbalanced dataset and its metadata sidecar."""
    cfg = _load(config_path, overrides, "synthetic", seed)
    out_dir = _out_dir(out)

    ds = generate_synthetic(cfg.synthetic)
    path = export_dataset(ds, out_dir / DATASET_FILE)

    console.print(f"[green]Wrote[/green] {len(ds)} samples x {ds.feature_count} features to {path}")
    console.print(f"  Class sizes: {ds.class_counts().tolist()}")
    console.print(f"  Metadata: {meta_path(path)}")


# --- train ---


@main.command()
@_config_options
@click.option("--seed", type=int, default=None, help="Root training seed")
@click.option("--data", type=click.Path(), default=None, help="Dataset CSV (default: config data.path, else synthetic)")
@_exit_on_error
def train(
    config_path: str | None,
    overrides: tuple[str, ...],
    out: str | None,
    seed: int | None,
    data: str | None,
) -> None:
    """Train encoder and classifier, then write checkpoints, report and metrics."""
    cfg = _load(config_path, overrides, "train", seed)
    out_dir = _out_dir(out)
    manifest = RunManifest(output_dir=out_dir, cell=cfg.train.ablation.cell, seed=cfg.train.seed)

    console.rule(f"[bold blue]{manifest.cell} (seed {manifest.seed})")

    # --- Stage 1: Load ---
    _mark_running(manifest, "load")
    try:
        ds, source, schema = _prepare_dataset(cfg, data, out_dir)
    except HANDLED_ERRORS as e:
        _fail(manifest, "load", e)
        raise
    _mark_completed(manifest, "load")
    _save_manifest(manifest)
    console.print(
        f"  Loaded {len(ds)} samples: "
        + ", ".join(f"{tag.value} {ds.indices(tag).size}" for tag in SplitTag)
    )

    # --- Stage 2: CFL + MLP ---
    console.print("  [cyan]Training...[/cyan]")
    _mark_running(manifest, "cfl")
    _mark_running(manifest, "mlp")
    try:
        result = run_pipeline(ds, cfg.train, show_progress=True)
    except HANDLED_ERRORS as e:
        _fail(manifest, "cfl", e)
        _fail(manifest, "mlp", e)
        raise
    for stage in ("cfl", "mlp"):
        _mark_completed(manifest, stage, result.report.stage_seconds.get(stage))
    _save_manifest(manifest)

    # --- Stage 3: Export ---
    _mark_running(manifest, "export")
    try:
        _export_run(out_dir, ds, source, schema, result)
    except (OSError, *HANDLED_ERRORS) as e:
        _fail(manifest, "export", e)
        raise
    _mark_completed(manifest, "export")
    _save_manifest(manifest)

    missing = [name for name in TRAIN_ARTIFACTS if not (out_dir / name).exists()]
    if missing:
        console.print(f"[red]Missing artifacts:[/red] {', '.join(missing)}")
        sys.exit(1)

    report = result.report
    table = Table(title=f"{report.cell} results")
    table.add_column("Split", style="bold")
    table.add_column("Accuracy")
    table.add_column("Macro G-mean")
    for tag, bundle in (("val", report.val), ("test", report.test)):
        if bundle is not None:
            table.add_row(tag, f"{bundle.accuracy:.4f}", f"{bundle.macro_gmean:.4f}")
    console.print(table)
    console.print(f"  [green]Done![/green] Artifacts in {out_dir.resolve()}")


def _export_run(out_dir: Path, ds: Dataset, source: Path, schema: CsvSchema, result) -> None:
    model, report = result.model, result.report
    info = {
        "cell": report.cell,
        "seed": report.seed,
        "feature_count": ds.feature_count,
        "class_count": ds.class_count,
    }
    networks = {"encoder": model.encoder}
    if model.projection is not None:
        networks["projection"] = model.projection
    save_checkpoint(out_dir / ENCODER_CKPT, networks, info)
    save_checkpoint(out_dir / CLASSIFIER_CKPT, {"classifier": result.classifier}, info)

    (out_dir / REPORT_FILE).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    for tag, bundle in (("val", report.val), ("test", report.test)):
        if bundle is not None:
            write_confusion_csv(
                ConfusionMatrix(np.array(bundle.confusion)),
                out_dir / f"confusion_{tag}.csv",
                list(ds.class_names),
            )
    export_embeddings(model.encoder, ds, out_dir / EMBEDDINGS_FILE)

    meta = dataset_meta(
        ds,
        source_csv=str(source),
        has_header=schema.has_header,
        label_column=schema.label_column,
    )
    (out_dir / SPLIT_FILE).write_text(meta.model_dump_json(indent=2), encoding="utf-8")


# --- evaluate ---


@main.command()
@click.option("--run", "run_dir", type=click.Path(), required=True, help="Directory written by `train`")
@click.option("--data", type=click.Path(), default=None, help="Dataset CSV (default: the one used for training)")
@click.option("--out", "-o", "out", type=click.Path(), default=None, help="Output directory (default: the run directory)")
@_exit_on_error
def evaluate(run_dir: str, data: str | None, out: str | None) -> None:
    """Score saved checkpoints on the test split of the training dataset."""
    run = validate_path(Path(run_dir))
    out_dir = Path(out) if out else run
    out_dir.mkdir(parents=True, exist_ok=True)

    encoder = load_checkpoint(run / ENCODER_CKPT)[0]["encoder"]
    classifier = load_checkpoint(run / CLASSIFIER_CKPT)[0]["classifier"]
    meta = read_meta(run / SPLIT_FILE)

    if data is not None:
        source = Path(data)
    elif meta.source_csv is not None:
        source = Path(meta.source_csv)
    else:
        raise ConfigError(f"{run / SPLIT_FILE} names no dataset; pass --data")
    source = validate_path(source)

    ds = load_csv(source, CsvSchema(
        class_count=meta.class_count,
        has_header=meta.has_header,
        label_column=meta.label_column,
    ))
    if ds.feature_count != encoder.in_dim:
        raise ShapeError(
            f"checkpoint expects {encoder.in_dim} features but {source.name} has {ds.feature_count}",
            layer=0,
        )
    if meta.split_assignment is None or len(meta.split_assignment) != len(ds):
        raise DataError(
            f"{SPLIT_FILE} assigns {len(meta.split_assignment or [])} rows, "
            f"{source.name} has {len(ds)}"
        )
    if meta.norm_min is None or meta.norm_max is None:
        raise DataError(f"{SPLIT_FILE} holds no normalization statistics")

    ds = dataclasses.replace(
        ds,
        class_names=tuple(meta.class_names),
        split_assignment=np.array([t.value for t in meta.split_assignment]),
    )
    ds = apply_minmax(ds, NormStats(np.array(meta.norm_min), np.array(meta.norm_max)))
    test = ds.subset(SplitTag.TEST)
    if len(test) == 0:
        raise DataError("test split is empty")

    bundle = evaluate_split(encoder, classifier, test)
    (out_dir / METRICS_FILE).write_text(bundle.model_dump_json(indent=2), encoding="utf-8")
    write_confusion_csv(
        ConfusionMatrix(np.array(bundle.confusion)), out_dir / "confusion_test.csv", list(ds.class_names),
    )

    console.print(f"  Test samples: {len(test)}")
    console.print(f"  Accuracy: [bold]{bundle.accuracy:.4f}[/bold]")
    console.print(f"  Macro G-mean: [bold]{bundle.macro_gmean:.4f}[/bold]")
    console.print(f"  [green]Wrote[/green] {out_dir / METRICS_FILE}")


# --- ablate ---


@main.command()
@_config_options
@click.option("--repeats", type=click.IntRange(min=1), default=None, help="Seeds per cell (default: config repeats)")
@click.option("--seed", type=int, default=None, help="Root training seed")
@click.option("--data", type=click.Path(), default=None, help="Dataset CSV (default: config data.path, else synthetic)")
@click.option("--with-baseline", is_flag=True, help="Append a plain MLP cell after the four ablation cells")
@_exit_on_error
def ablate(
    config_path: str | None,
    overrides: tuple[str, ...],
    out: str | None,
    repeats: int | None,
    seed: int | None,
    data: str | None,
    with_baseline: bool,
) -> None:
    """Run every ablation cell over several seeds and tabulate test metrics."""
    cfg = _load(config_path, overrides, "train", seed)
    out_dir = _out_dir(out)
    repeats = repeats or cfg.repeats
    cells = [*CELLS, BASELINE_CELL] if with_baseline else list(CELLS)

    ds, _, _ = _prepare_dataset(cfg, data, out_dir)
    console.print(f"Running {len(cells)} cells x {repeats} seeds on {len(ds)} samples")
    started = time.perf_counter()
    report = run_experiment(ds, cfg.train, repeats, cells)
    elapsed = time.perf_counter() - started

    _write_ablation_table(report, repeats, out_dir / ABLATION_TABLE)
    (out_dir / ABLATION_REPORT).write_text(report.model_dump_json(indent=2), encoding="utf-8")

    table = Table(title=f"Ablation ({repeats} seeds)")
    table.add_column("Cell", style="bold")
    table.add_column("Macro G-mean")
    table.add_column("Accuracy")
    for summary in report.cells:
        table.add_row(
            summary.cell,
            f"{summary.macro_gmean_mean:.4f} ± {summary.macro_gmean_std:.4f}",
            f"{summary.accuracy_mean:.4f} ± {summary.accuracy_std:.4f}",
        )
    console.print(table)
    console.print(f"  [green]Done![/green] {out_dir / ABLATION_TABLE} ({elapsed:.1f}s)")


def _write_ablation_table(report: ExperimentReport, repeats: int, path: Path) -> Path:
    frame = pd.DataFrame([
        {
            "cell": s.cell,
            "repeats": repeats,
            "macro_gmean_mean": s.macro_gmean_mean,
            "macro_gmean_std": s.macro_gmean_std,
            "accuracy_mean": s.accuracy_mean,
            "accuracy_std": s.accuracy_std,
        }
        for s in report.cells
    ])
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


# --- mine-debug ---


@main.command("mine-debug")
@_config_options
@click.option("--seed", type=int, default=None, help="Root training seed")
@click.option("--data", type=click.Path(), default=None, help="Dataset CSV (default: config data.path, else synthetic)")
@_exit_on_error
def mine_debug(
    config_path: str | None,
    overrides: tuple[str, ...],
    out: str | None,
    seed: int | None,
    data: str | None,
) -> None:
    """Dump the first contrastive stage's HSM batches as JSON lines.

    Indices refer to rows of the training split in dataset order.
    """
    cfg = _load(config_path, overrides, "train", seed)
    out_dir = _out_dir(out)
    ds, _, _ = _prepare_dataset(cfg, data, out_dir)

    train_rows = ds.subset(SplitTag.TRAIN)
    view = refresh_view(None, train_rows, Stage.CFL)
    batches = build_batches(view, miner_config(cfg.train, cfg.train.seed + SEED_CFL_BATCHES))
    path = dump_batches(batches, out_dir / BATCHES_FILE)

    counts: dict[str, int] = {}
    for batch in batches:
        for p in batch.provenance:
            counts[p.value] = counts.get(p.value, 0) + 1
    console.print(f"[green]Wrote[/green] {len(batches)} batches to {path}")
    console.print(f"  Provenance: {json.dumps(counts, sort_keys=True)}")


# --- Shared helpers ---


def _load(
    config_path: str | None, overrides: tuple[str, ...], seed_section: str, seed: int | None,
) -> ExperimentConfig:
    items = list(overrides)
    if seed is not None:
        items.append(f"{seed_section}.seed={seed}")
    return load_config(Path(config_path) if config_path else None, items)


def _out_dir(out: str | None) -> Path:
    out_dir = Path(out) if out else default_output_dir()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Output directory {out_dir} is not writable: {e}") from e
    return out_dir


def _prepare_dataset(
    cfg: ExperimentConfig, data: str | None, out_dir: Path,
) -> tuple[Dataset, Path, CsvSchema]:
    """Load or synthesize the dataset, split it and fit normalization on train.

    Returns the dataset, the CSV it can be re-read from and that CSV's schema.
    """
    source = Path(data) if data else cfg.data.path
    if source is not None:
        source = validate_path(source)
        sidecar = meta_path(source)
        if sidecar.exists():
            meta = read_meta(sidecar)
            schema = CsvSchema(has_header=meta.has_header, label_column=meta.label_column)
        else:
            schema = cfg.data.schema()
        ds = load_dataset(source, schema)
    else:
        ds = generate_synthetic(cfg.synthetic)
        source = export_dataset(ds, out_dir / DATASET_FILE).resolve()
        schema = CsvSchema()
        logger.info("No dataset given; generated %d synthetic samples", len(ds))

    d = cfg.data
    ds = split(
        ds,
        train_frac=d.train_frac,
        test_frac=d.test_frac,
        val_frac_of_train=d.val_frac_of_train,
        seed=d.split_seed,
        stratified=d.stratified,
    )
    return normalize_minmax(ds), source, schema


# --- Manifest helpers ---


def _save_manifest(manifest: RunManifest) -> None:
    manifest_path = manifest.output_dir / MANIFEST_FILE
    data = manifest.model_dump(mode="json")
    manifest_path.write_text(json.dumps(data, indent=2, ensure_ascii=False), encoding="utf-8")


def _mark_running(manifest: RunManifest, stage: str) -> None:
    manifest.stages[stage].status = StageStatusEnum.RUNNING
    manifest.stages[stage].started_at = datetime.now()


def _mark_completed(manifest: RunManifest, stage: str, seconds: float | None = None) -> None:
    entry = manifest.stages[stage]
    entry.status = StageStatusEnum.COMPLETED
    entry.completed_at = datetime.now()
    entry.error = None
    if seconds is None and entry.started_at is not None:
        seconds = (entry.completed_at - entry.started_at).total_seconds()
    entry.seconds = seconds
    if seconds is not None:
        manifest.stage_seconds[stage] = seconds


def _mark_failed(manifest: RunManifest, stage: str, error: str) -> None:
    manifest.stages[stage].status = StageStatusEnum.FAILED
    manifest.stages[stage].error = error


def _fail(manifest: RunManifest, stage: str, error: Exception) -> None:
    _mark_failed(manifest, stage, str(error))
    _save_manifest(manifest)
