"""Pydantic data models for the HSMCFL pipeline."""

from __future__ import annotations

import logging
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Literal

from pydantic import (
    AliasChoices,
    BaseModel,
    ConfigDict,
    Field,
    PositiveInt,
    model_validator,
)

logger = logging.getLogger(__name__)


class SplitTag(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Provenance(str, Enum):
    INIT = "init"
    RANDOM = "random"
    HARD_POS = "hard_pos"
    HARD_NEG = "hard_neg"


class Stage(str, Enum):
    CFL = "cfl"
    MLP = "mlp"


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


# --- Data ---


class CsvSchema(BaseModel):
    """Column layout of a fault-data CSV file."""

    model_config = ConfigDict(extra="forbid")

    feature_count: PositiveInt | None = None
    class_count: PositiveInt | None = None
    label_column: int = -1
    has_header: bool = True
    feature_names: list[str] | None = None


class SyntheticSpec(BaseModel):
    """Recipe for a desk-scale dataset with drifting, imbalanced classes.

    Classes are laid out in time one after another. Within class c the mean
    moves from center c toward center c+1, reaching ``drift_rate`` of the gap
    by the end of the class. ``center_spacing`` is the distance between
    adjacent centers in units of ``noise_sigma``.
    """

    model_config = ConfigDict(extra="forbid")

    class_count: int = Field(5, ge=2)
    feature_count: PositiveInt = 26
    class_sizes: list[int] = Field(default_factory=lambda: [2000, 400, 200, 100, 50])
    drift_rate: float = Field(0.9, ge=0.0)
    noise_sigma: float = Field(1.0, gt=0.0)
    center_spacing: float = Field(6.0, gt=0.0)
    offset_range: float = Field(10.0, ge=0.0)
    imbalanced: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _check_class_sizes(self) -> SyntheticSpec:
        if len(self.class_sizes) != self.class_count:
            raise ValueError(
                f"class_sizes has {len(self.class_sizes)} entries, "
                f"class_count is {self.class_count}"
            )
        bad = [i for i, n in enumerate(self.class_sizes) if n <= 0]
        if bad:
            raise ValueError(f"class_sizes must be positive (classes {bad})")
        if self.imbalanced and max(self.class_sizes) < 10 * min(self.class_sizes):
            raise ValueError(
                "imbalanced spec needs at least a 10:1 ratio between the "
                f"largest and smallest class, got {self.class_sizes}"
            )
        return self


class DataConfig(BaseModel):
    """Where the dataset comes from and how it is split."""

    model_config = ConfigDict(extra="forbid")

    path: Path | None = None
    has_header: bool = True
    label_column: int = -1
    class_count: PositiveInt | None = None
    train_frac: float = Field(0.7, gt=0.0, lt=1.0)
    test_frac: float = Field(0.3, gt=0.0, lt=1.0)
    val_frac_of_train: float = Field(0.2, ge=0.0, lt=1.0)
    stratified: bool = True
    split_seed: int = 0

    @model_validator(mode="after")
    def _check_fractions(self) -> DataConfig:
        if abs(self.train_frac + self.test_frac - 1.0) > 1e-9:
            raise ValueError(
                f"train_frac + test_frac must be 1, got {self.train_frac + self.test_frac}"
            )
        return self

    def schema(self) -> CsvSchema:
        return CsvSchema(
            class_count=self.class_count,
            label_column=self.label_column,
            has_header=self.has_header,
        )


# --- Networks ---


class LayerSpec(BaseModel):
    """One dense layer: out_dim x in_dim weights, a bias and an activation."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    in_dim: PositiveInt
    out_dim: PositiveInt
    activation: Activation = Activation.RELU


class ArchitectureConfig(BaseModel):
    """Hidden widths of the encoder, projection head and classifier."""

    model_config = ConfigDict(extra="forbid")

    encoder_hidden: list[PositiveInt] = Field(default_factory=lambda: [128, 128], min_length=1)
    projection_dim: PositiveInt = 64
    classifier_hidden: list[PositiveInt] = Field(default_factory=lambda: [64])


# --- Mining and training ---


class MinerConfig(BaseModel):
    """Hard-sample-mining batch construction settings.

    ``p1`` is accepted as an alias of ``p_random``. ``p2`` is accepted and
    ignored.
    """

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    batch_size: int = Field(128, ge=2)
    p_random: float = Field(
        0.4, ge=0.0, le=1.0, validation_alias=AliasChoices("p_random", "p1"),
    )
    p2: float | None = None
    seed: int = 0
    exclude_in_batch: bool = False
    candidate_pool: PositiveInt | None = None

    @model_validator(mode="after")
    def _warn_unused_threshold(self) -> MinerConfig:
        if self.p2 is not None:
            logger.warning("miner.p2=%s has no role in batch construction; ignored", self.p2)
        return self


class AblationFlags(BaseModel):
    """Which pipeline stages build their mini-batches with HSM."""

    model_config = ConfigDict(extra="forbid")

    use_cfl: bool = True
    hsm_in_cfl: bool = True
    hsm_in_mlp: bool = True

    @property
    def cell(self) -> str:
        if not self.use_cfl:
            return "MLP"
        return {
            (True, True): "HSMCFL",
            (True, False): "HSM+CFL-MLP",
            (False, True): "CFL-HSM+MLP",
            (False, False): "CFL-MLP",
        }[(self.hsm_in_cfl, self.hsm_in_mlp)]

    @classmethod
    def for_cell(cls, cell: str) -> AblationFlags:
        cells = {
            "HSMCFL": cls(hsm_in_cfl=True, hsm_in_mlp=True),
            "HSM+CFL-MLP": cls(hsm_in_cfl=True, hsm_in_mlp=False),
            "CFL-HSM+MLP": cls(hsm_in_cfl=False, hsm_in_mlp=True),
            "CFL-MLP": cls(hsm_in_cfl=False, hsm_in_mlp=False),
            "MLP": cls(use_cfl=False, hsm_in_cfl=False, hsm_in_mlp=False),
        }
        if cell not in cells:
            raise ValueError(f"Unknown ablation cell {cell!r}; expected one of {list(cells)}")
        return cells[cell]


class TrainConfig(BaseModel):
    """Hyperparameters of both training stages."""

    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(128, ge=2)
    epochs: int = Field(20, ge=0)
    temperature: float = Field(0.1, gt=0.0)
    num_stages: PositiveInt = 4
    cfl_stages: PositiveInt | None = None
    mlp_stages: PositiveInt | None = None
    optimizer: Literal["adam", "sgd"] = "adam"
    augmentation: Literal["none"] = "none"
    early_stopping: bool = False
    patience: PositiveInt = 1
    miner: MinerConfig = Field(default_factory=MinerConfig)
    ablation: AblationFlags = Field(default_factory=AblationFlags)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    seed: int = 0

    @property
    def effective_cfl_stages(self) -> int:
        return self.cfl_stages or self.num_stages

    @property
    def effective_mlp_stages(self) -> int:
        return self.mlp_stages or self.num_stages


class ExperimentConfig(BaseModel):
    """Top-level configuration file contents."""

    model_config = ConfigDict(extra="forbid")

    data: DataConfig = Field(default_factory=DataConfig)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    repeats: PositiveInt = 10


# --- Results ---


class MetricsBundle(BaseModel):
    """Accuracy and G-mean scores derived from one confusion matrix."""

    accuracy: float = Field(ge=0.0, le=1.0)
    per_class_gmean: list[float]
    macro_gmean: float = Field(ge=0.0, le=1.0)
    confusion: list[list[int]]


class TrainReport(BaseModel):
    """Loss traces and final metrics of one pipeline run.

    ``stage_seconds`` is kept out of the serialized report so that reruns
    produce identical files; it is written to the run manifest instead.
    """

    cell: str
    seed: int
    cfl_loss: list[list[float]] = Field(default_factory=list)
    mlp_loss: list[list[float]] = Field(default_factory=list)
    misclassified_pool_sizes: list[int] = Field(default_factory=list)
    val: MetricsBundle | None = None
    test: MetricsBundle | None = None
    stage_seconds: dict[str, float] = Field(default_factory=dict, exclude=True)


class CellSummary(BaseModel):
    """Mean and standard deviation of test metrics across repeats."""

    cell: str
    seeds: list[int]
    accuracy_mean: float
    accuracy_std: float
    macro_gmean_mean: float
    macro_gmean_std: float
    runs: list[TrainReport]


class ExperimentReport(BaseModel):
    cells: list[CellSummary]

    def cell(self, name: str) -> CellSummary:
        for summary in self.cells:
            if summary.cell == name:
                return summary
        raise KeyError(name)


class DatasetMeta(BaseModel):
    """Sidecar metadata written next to an exported dataset CSV."""

    class_count: int
    feature_count: int
    feature_names: list[str]
    class_names: list[str]
    norm_min: list[float] | None = None
    norm_max: list[float] | None = None
    split_assignment: list[SplitTag] | None = None
    synthetic_spec: SyntheticSpec | None = None
    source_csv: str | None = None
    has_header: bool = True
    label_column: int = -1


# --- Run manifest ---


class StageStatusEnum(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class StageStatus(BaseModel):
    """Status of a single step of a training run."""

    status: StageStatusEnum = StageStatusEnum.PENDING
    started_at: datetime | None = None
    completed_at: datetime | None = None
    seconds: float | None = None
    error: str | None = None


class RunManifest(BaseModel):
    """Tracks progress and wall-clock timing of one `train` run."""

    output_dir: Path
    cell: str
    seed: int
    stages: dict[str, StageStatus] = Field(default_factory=lambda: {
        "load": StageStatus(),
        "cfl": StageStatus(),
        "mlp": StageStatus(),
        "export": StageStatus(),
    })
    created_at: datetime = Field(default_factory=datetime.now)
    stage_seconds: dict[str, float] = Field(default_factory=dict)
