"""Fault-data ingestion: CSV load/export, min-max normalization, splits, synthetic data."""

from __future__ import annotations

import dataclasses
import logging
import re
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .config import LABEL_COLUMN_NAME, class_names, feature_names
from .models import CsvSchema, DatasetMeta, SplitTag, SyntheticSpec

logger = logging.getLogger(__name__)

# 17 significant digits round-trip every float64 exactly
FLOAT_FORMAT = "%.17g"
_PARSER_LINE = re.compile(r"line (\d+)")


class DataError(Exception):
    """Raised when a dataset cannot be built or transformed."""


class ParseError(DataError):
    """A CSV row that does not match the schema. ``row`` is the 1-based file line."""

    def __init__(self, row: int, message: str) -> None:
        super().__init__(f"row {row}: {message}")
        self.row = row


class EmptyFileError(DataError):
    """The CSV holds no data rows."""


class SplitError(DataError):
    """A split cannot be drawn; ``label`` names the offending class when known."""

    def __init__(self, message: str, label: int | None = None) -> None:
        super().__init__(message)
        self.label = label


@dataclass(frozen=True)
class Sample:
    """One SCADA record."""

    features: np.ndarray
    label: int
    timestamp_index: int


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-column minimum and maximum used by min-max scaling."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self) -> None:
        if self.min.shape != self.max.shape:
            raise DataError("norm_stats min/max shapes differ")
        if np.any(self.min > self.max):
            raise DataError("norm_stats min exceeds max for some column")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of samples with optional normalization stats and split tags.

    When ``norm_stats`` is set the features are already scaled with it.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    feature_names: tuple[str, ...]
    class_names: tuple[str, ...]
    timestamp_index: np.ndarray | None = None
    norm_stats: NormStats | None = None
    split_assignment: np.ndarray | None = None
    warnings: tuple[str, ...] = ()
    synthetic_spec: SyntheticSpec | None = None

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64, copy=True, ndmin=2)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if features.shape[0] != labels.shape[0]:
            raise DataError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if features.shape[1] != len(self.feature_names):
            raise DataError(
                f"{features.shape[1]} feature columns but {len(self.feature_names)} names"
            )
        if not np.all(np.isfinite(features)):
            raise DataError("features must be finite")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        timestamps = (
            np.arange(labels.size, dtype=np.int64)
            if self.timestamp_index is None
            else np.array(self.timestamp_index, dtype=np.int64, copy=True)
        )
        split = None
        if self.split_assignment is not None:
            split = np.array([SplitTag(t).value for t in self.split_assignment], dtype="<U5")
            if split.shape != labels.shape:
                raise DataError("split_assignment must have one tag per sample")
        for arr in (features, labels, timestamps) + ((split,) if split is not None else ()):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "timestamp_index", timestamps)
        object.__setattr__(self, "split_assignment", split)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def feature_count(self) -> int:
        return int(self.features.shape[1])

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.labels[i]), int(self.timestamp_index[i]))

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def indices(self, tag: SplitTag) -> np.ndarray:
        if self.split_assignment is None:
            raise DataError("dataset has no split assignment")
        return np.flatnonzero(self.split_assignment == SplitTag(tag).value)

    def subset(self, tag: SplitTag) -> Dataset:
        """Rows of one split, order preserved."""
        rows = self.indices(tag)
        return dataclasses.replace(
            self,
            features=self.features[rows],
            labels=self.labels[rows],
            timestamp_index=self.timestamp_index[rows],
            split_assignment=self.split_assignment[rows],
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


# --- CSV ---


def load_csv(path: Path, schema: CsvSchema | None = None) -> Dataset:
    """Read a fault-data CSV; timestamps follow row order, no normalization applied."""
    schema = schema or CsvSchema()
    if not path.exists():
        raise DataError(f"Dataset file does not exist: {path}")
    header_lines = 1 if schema.has_header else 0

    try:
        frame = pd.read_csv(
            path,
            header=0 if schema.has_header else None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=True,
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError as exc:
        raise EmptyFileError(f"{path} is empty") from exc
    except pd.errors.ParserError as exc:
        match = _PARSER_LINE.search(str(exc))
        row = int(match.group(1)) if match else 0
        raise ParseError(row, f"wrong number of fields ({exc})") from exc
    except UnicodeDecodeError as exc:
        raise ParseError(_undecodable_line(path), f"not valid UTF-8 ({exc.reason})") from exc

    if frame.empty:
        raise EmptyFileError(f"{path} has no data rows")

    n_cols = frame.shape[1]
    if n_cols < 2:
        raise ParseError(1, f"expected feature columns plus a label column, found {n_cols}")
    if schema.feature_count is not None and n_cols != schema.feature_count + 1:
        raise ParseError(
            1, f"expected {schema.feature_count + 1} columns, found {n_cols}"
        )

    short_rows = np.flatnonzero(frame.isna().any(axis=1).to_numpy())
    if short_rows.size:
        raise ParseError(
            int(short_rows[0]) + 1 + header_lines,
            f"expected {n_cols} fields",
        )

    label_idx = schema.label_column % n_cols
    feature_idx = [j for j in range(n_cols) if j != label_idx]
    raw_features = frame.iloc[:, feature_idx]
    try:
        # float() on each cell is correctly rounded, so %.17g exports reload bit-exactly
        numeric = raw_features.to_numpy(dtype=object).astype(np.float64)
    except ValueError:
        numeric = raw_features.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(numeric)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ParseError(
            int(r) + 1 + header_lines,
            f"non-numeric or non-finite feature {raw_features.iat[r, c]!r} "
            f"in column {raw_features.columns[c]}",
        )

    raw_labels = frame.iloc[:, label_idx]
    label_values = pd.to_numeric(raw_labels, errors="coerce").to_numpy(dtype=np.float64)
    for r, value in enumerate(label_values):
        if not np.isfinite(value) or value != np.floor(value) or value < 0:
            raise ParseError(r + 1 + header_lines, f"label {raw_labels.iat[r]!r} is not a class index")
    labels = label_values.astype(np.int64)

    class_count = schema.class_count or int(labels.max()) + 1
    over = np.flatnonzero(labels >= class_count)
    if over.size:
        r = int(over[0])
        raise ParseError(
            r + 1 + header_lines,
            f"label {labels[r]} out of range for {class_count} classes",
        )

    if schema.has_header:
        names = [str(c) for c in raw_features.columns]
    elif schema.feature_names is not None:
        names = list(schema.feature_names)
    else:
        names = feature_names(len(feature_idx))

    logger.debug("Loaded %d rows x %d features from %s", len(labels), len(names), path)
    return Dataset(
        features=numeric,
        labels=labels,
        class_count=class_count,
        feature_names=tuple(names),
        class_names=tuple(class_names(class_count)),
    )


def _undecodable_line(path: Path) -> int:
    for number, line in enumerate(path.read_bytes().splitlines(), start=1):
        try:
            line.decode("utf-8")
        except UnicodeDecodeError:
            return number
    return 0


def meta_path(csv_path: Path) -> Path:
    """Sidecar metadata location for a dataset CSV."""
    return csv_path.with_name(csv_path.stem + ".meta.json")


def export_dataset(ds: Dataset, path: Path) -> Path:
    """Write features + label as CSV and the metadata sidecar as JSON."""
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(ds.features, columns=list(ds.feature_names))
    frame[LABEL_COLUMN_NAME] = ds.labels
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")

    meta = dataset_meta(ds, source_csv=path.name)
    meta_path(path).write_text(meta.model_dump_json(indent=2), encoding="utf-8")
    return path


def dataset_meta(
    ds: Dataset,
    source_csv: str | None = None,
    has_header: bool = True,
    label_column: int = -1,
) -> DatasetMeta:
    """Everything needed to reload ``ds`` from its CSV and reapply its split and scaling."""
    return DatasetMeta(
        class_count=ds.class_count,
        feature_count=ds.feature_count,
        feature_names=list(ds.feature_names),
        class_names=list(ds.class_names),
        norm_min=ds.norm_stats.min.tolist() if ds.norm_stats else None,
        norm_max=ds.norm_stats.max.tolist() if ds.norm_stats else None,
        split_assignment=(
            [SplitTag(t) for t in ds.split_assignment]
            if ds.split_assignment is not None else None
        ),
        synthetic_spec=ds.synthetic_spec,
        source_csv=source_csv,
        has_header=has_header,
        label_column=label_column,
    )


def read_meta(path: Path) -> DatasetMeta:
    try:
        return DatasetMeta.model_validate_json(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"Cannot read dataset metadata {path}: {exc}") from exc


def load_dataset(path: Path, schema: CsvSchema | None = None) -> Dataset:
    """Load a CSV and, when a sidecar exists, restore its metadata."""
    sidecar = meta_path(path)
    if not sidecar.exists():
        return load_csv(path, schema)

    meta = read_meta(sidecar)
    ds = load_csv(path, CsvSchema(
        feature_count=meta.feature_count,
        class_count=meta.class_count,
        has_header=meta.has_header,
        label_column=meta.label_column,
        feature_names=None if meta.has_header else meta.feature_names,
    ))
    stats = None
    if meta.norm_min is not None and meta.norm_max is not None:
        stats = NormStats(np.array(meta.norm_min), np.array(meta.norm_max))
    return dataclasses.replace(
        ds,
        class_names=tuple(meta.class_names),
        norm_stats=stats,
        split_assignment=(
            np.array([t.value for t in meta.split_assignment])
            if meta.split_assignment is not None else None
        ),
        synthetic_spec=meta.synthetic_spec,
    )


# --- Normalization ---


def normalize_minmax(ds: Dataset) -> Dataset:
    """Scale every column to [0, 1].

    Statistics come from the train split when one is assigned, otherwise from
    all rows, and are always recomputed from the input.
    """
    if ds.split_assignment is not None:
        rows = ds.indices(SplitTag.TRAIN)
        if rows.size == 0:
            raise DataError("train split is empty; cannot fit normalization")
        fit = ds.features[rows]
    else:
        if len(ds) == 0:
            raise DataError("cannot normalize an empty dataset")
        fit = ds.features
    stats = NormStats(fit.min(axis=0), fit.max(axis=0))
    return apply_minmax(ds, stats)


def apply_minmax(ds: Dataset, stats: NormStats) -> Dataset:
    """Scale with given statistics; values outside the fitted range are clipped."""
    if stats.min.shape != (ds.feature_count,):
        raise DataError(
            f"norm_stats cover {stats.min.shape[0]} columns, dataset has {ds.feature_count}"
        )
    span = stats.max - stats.min
    constant = span == 0
    scaled = (ds.features - stats.min) / np.where(constant, 1.0, span)
    scaled[:, constant] = 0.0
    np.clip(scaled, 0.0, 1.0, out=scaled)

    warnings = list(ds.warnings)
    for j in np.flatnonzero(constant):
        message = f"constant column {ds.feature_names[j]!r} mapped to zeros"
        logger.warning(message)
        warnings.append(message)

    return dataclasses.replace(
        ds, features=scaled, norm_stats=stats, warnings=tuple(warnings),
    )


# --- Splits ---


def split(
    ds: Dataset,
    train_frac: float = 0.7,
    test_frac: float = 0.3,
    val_frac_of_train: float = 0.2,
    seed: int = 0,
    stratified: bool = True,
) -> Dataset:
    """Assign each sample to train, val or test.

    Test takes ``test_frac`` of the data and val takes ``val_frac_of_train``
    of the remainder, per class when stratified. Counts are rounded half up
    and every split keeps at least one sample of every class.
    """
    if abs(train_frac + test_frac - 1.0) > 1e-9:
        raise SplitError(f"train_frac + test_frac must be 1, got {train_frac + test_frac}")
    if not 0.0 <= val_frac_of_train < 1.0:
        raise SplitError(f"val_frac_of_train must lie in [0, 1), got {val_frac_of_train}")

    n_splits = 3 if val_frac_of_train > 0 else 2
    counts = ds.class_counts()
    for label, count in enumerate(counts):
        if 0 < count < n_splits:
            raise SplitError(
                f"class {label} ({ds.class_names[label]}) has {count} samples, "
                f"fewer than the {n_splits} splits",
                label=label,
            )

    rng = np.random.default_rng(seed)
    if stratified:
        groups = [np.flatnonzero(ds.labels == c) for c in range(ds.class_count) if counts[c]]
    else:
        groups = [np.arange(len(ds))]

    assignment = np.full(len(ds), SplitTag.TRAIN.value, dtype="<U5")
    for group in groups:
        order = rng.permutation(group)
        n = order.size
        n_test = min(max(_round_half_up(n * test_frac), 1), n - (n_splits - 1))
        rest = n - n_test
        n_val = 0
        if n_splits == 3:
            n_val = min(max(_round_half_up(rest * val_frac_of_train), 1), rest - 1)
        assignment[order[:n_test]] = SplitTag.TEST.value
        assignment[order[n_test:n_test + n_val]] = SplitTag.VAL.value

    return dataclasses.replace(ds, split_assignment=assignment)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# --- Synthetic data ---


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Sequential Gaussian classes whose means drift toward the next class.

    Class centers sit on a line through feature space, ``center_spacing``
    noise widths apart. Sample k of class c (of n) is drawn around
    center_c + min(drift_rate * k / n, 1) * (center_{c+1} - center_c); the
    last class has no successor and stays stationary.
    """
    rng = np.random.default_rng(spec.seed)
    D, K = spec.feature_count, spec.class_count

    direction = rng.standard_normal(D)
    direction /= np.linalg.norm(direction)
    step = spec.center_spacing * spec.noise_sigma * direction
    offsets = rng.uniform(-spec.offset_range, spec.offset_range, D)
    centers = offsets + np.arange(K)[:, None] * step

    blocks, labels = [], []
    for c, n in enumerate(spec.class_sizes):
        if c < K - 1:
            shift = np.minimum(spec.drift_rate * np.arange(n) / n, 1.0)
        else:
            shift = np.zeros(n)
        means = centers[c] + shift[:, None] * step
        blocks.append(means + rng.normal(0.0, spec.noise_sigma, size=(n, D)))
        labels.append(np.full(n, c, dtype=np.int64))

    logger.debug("Generated %d samples for %d classes", sum(spec.class_sizes), K)
    return Dataset(
        features=np.vstack(blocks),
        labels=np.concatenate(labels),
        class_count=K,
        feature_names=tuple(feature_names(D)),
        class_names=tuple(class_names(K)),
        synthetic_spec=spec,
    )
