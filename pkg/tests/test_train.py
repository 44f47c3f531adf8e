import dataclasses
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from hsmcfl import train as train_module
from hsmcfl.config import load_config
from hsmcfl.dataio import DataError, generate_synthetic, normalize_minmax, split
from hsmcfl.hsm import uniform_batches
from hsmcfl.models import AblationFlags, ArchitectureConfig, MinerConfig, SplitTag, TrainConfig
from hsmcfl.nn import forward, identity_network
from hsmcfl.train import (
    BASELINE_CELL,
    CELLS,
    SEED_CFL_BATCHES,
    SEED_MLP_BATCHES,
    TrainingError,
    build_contrastive_encoder,
    evaluate_split,
    export_embeddings,
    misclassified,
    predict,
    run_experiment,
    run_pipeline,
    summarize,
    train_cfl,
    train_classifier,
)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def _unit(m):
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _copy(net):
    return [w.copy() for w in net.weights] + [b.copy() for b in net.biases]


# --- stage 1 ---


def test_zero_epochs_returns_initial_network(separable_dataset, small_config):
    cfg = small_config.model_copy(update={"epochs": 0, "num_stages": 1})
    result = train_cfl(separable_dataset, cfg)
    fresh = build_contrastive_encoder(cfg, separable_dataset.feature_count)
    for a, b in zip(_copy(result.model.encoder), _copy(fresh.encoder)):
        np.testing.assert_array_equal(a, b)
    assert result.loss_trace == [[]]


def test_cfl_trace_shape_and_finiteness(separable_dataset, small_config):
    result = train_cfl(separable_dataset, small_config)
    assert len(result.loss_trace) == small_config.num_stages
    assert all(len(stage) == small_config.epochs for stage in result.loss_trace)
    assert np.all(np.isfinite(result.loss_trace))


def test_cfl_separates_classes(make_dataset, small_config):
    ds = make_dataset([60, 60])
    cfg = small_config.model_copy(update={"epochs": 20, "num_stages": 1})
    encoder = train_cfl(ds, cfg).model.encoder
    z = _unit(forward(encoder, ds.features).output)
    sims = z @ z.T
    same = ds.labels[:, None] == ds.labels[None, :]
    off_diag = ~np.eye(len(ds), dtype=bool)
    assert sims[same & off_diag].mean() > sims[~same].mean()


def test_cfl_loss_decreases_for_most_seeds(make_dataset, small_config):
    ds = make_dataset([60, 60])
    decreased = 0
    for seed in range(10):
        cfg = small_config.model_copy(update={"epochs": 20, "num_stages": 1, "seed": seed})
        trace = train_cfl(ds, cfg).loss_trace[0]
        decreased += trace[-1] < trace[0]
    assert decreased >= 8


def test_cfl_is_deterministic(separable_dataset, small_config):
    a = train_cfl(separable_dataset, small_config)
    b = train_cfl(separable_dataset, small_config)
    assert a.loss_trace == b.loss_trace
    for x, y in zip(_copy(a.model.encoder), _copy(b.model.encoder)):
        np.testing.assert_array_equal(x, y)


def test_batch_larger_than_training_split(separable_dataset, small_config):
    cfg = small_config.model_copy(update={"batch_size": 500})
    with pytest.raises(TrainingError, match="fewer than batch_size"):
        train_cfl(separable_dataset, cfg)


# --- stage 2 ---


def test_classifier_never_touches_encoder(separable_dataset, small_config):
    encoder = train_cfl(separable_dataset, small_config).model.encoder
    before = _copy(encoder)
    train_classifier(separable_dataset, encoder, small_config)
    for a, b in zip(before, _copy(encoder)):
        np.testing.assert_array_equal(a, b)


def test_identity_encoder_linear_classifier_fits_separable_set(make_dataset):
    ds = make_dataset([60, 60])
    cfg = TrainConfig(
        learning_rate=0.05,
        batch_size=16,
        epochs=40,
        num_stages=1,
        architecture=ArchitectureConfig(classifier_hidden=[]),
    )
    encoder = identity_network(ds.feature_count)
    classifier, _ = train_classifier(ds, encoder, cfg)
    train = ds.subset(SplitTag.TRAIN)
    assert len(classifier.layers) == 1
    assert np.mean(predict(encoder, classifier, train.features) == train.labels) >= 0.99


def test_misclassified_pool_matches_direct_scan(separable_dataset, small_config):
    encoder = train_cfl(separable_dataset, small_config).model.encoder
    classifier, report = train_classifier(separable_dataset, encoder, small_config)
    train = separable_dataset.subset(SplitTag.TRAIN)
    logits = forward(classifier, forward(encoder, train.features).output).output
    expected = [i for i in range(len(train)) if int(np.argmax(logits[i])) != train.labels[i]]
    np.testing.assert_array_equal(misclassified(classifier, encoder(train.features), train.labels), expected)
    assert report.misclassified_pool_sizes[-1] == len(expected)
    assert len(report.misclassified_pool_sizes) == small_config.num_stages


def test_perfect_classifier_has_empty_pool():
    features = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.5]])
    labels = np.array([0, 1, 0])
    assert misclassified(identity_network(2), features, labels).size == 0


def test_classifier_output_shape(separable_dataset, small_config):
    encoder = identity_network(separable_dataset.feature_count)
    classifier, _ = train_classifier(separable_dataset, encoder, small_config)
    out = forward(classifier, separable_dataset.features[:7]).output
    assert out.shape == (7, separable_dataset.class_count)


def test_classifier_trace_shape(separable_dataset, small_config):
    encoder = identity_network(separable_dataset.feature_count)
    _, report = train_classifier(separable_dataset, encoder, small_config)
    assert len(report.mlp_loss) == small_config.num_stages
    assert all(len(stage) == small_config.epochs for stage in report.mlp_loss)


def test_separate_stage_counts(separable_dataset, small_config):
    cfg = small_config.model_copy(update={"cfl_stages": 1, "mlp_stages": 3})
    report = run_pipeline(separable_dataset, cfg).report
    assert len(report.cfl_loss) == 1
    assert len(report.mlp_loss) == 3


def test_early_stopping_bounds_trace(separable_dataset, small_config):
    cfg = small_config.model_copy(update={"early_stopping": True, "patience": 1, "num_stages": 6})
    _, report = train_classifier(separable_dataset, identity_network(separable_dataset.feature_count), cfg)
    assert 1 <= len(report.mlp_loss) <= 6


def test_classifier_stages_mine_from_misclassified_pool(make_dataset, small_config):
    ds = make_dataset([60, 40, 30], drift_rate=0.9, spacing=1.0)
    cfg = small_config.model_copy(update={"num_stages": 3})
    _, report = train_classifier(ds, identity_network(ds.feature_count), cfg)
    assert report.misclassified_pool_sizes[0] >= 2
    assert len(report.misclassified_pool_sizes) == 3
    assert len(report.mlp_loss) == 3


def test_flags_off_uses_seeded_uniform_batches(separable_dataset, small_config, monkeypatch):
    def _no_mining(*args, **kwargs):
        raise AssertionError("HSM batches built with both flags off")

    seen = []

    def _recording(n, batch_size, rng):
        batches = uniform_batches(n, batch_size, rng)
        seen.append([b.indices for b in batches])
        return batches

    monkeypatch.setattr(train_module, "build_batches", _no_mining)
    monkeypatch.setattr(train_module, "uniform_batches", _recording)
    cfg = small_config.model_copy(update={"ablation": AblationFlags.for_cell("CFL-MLP")})
    report = run_pipeline(separable_dataset, cfg).report
    assert report.cell == "CFL-MLP"

    n = len(separable_dataset.subset(SplitTag.TRAIN))
    expected = []
    for offset in (SEED_CFL_BATCHES, SEED_MLP_BATCHES):
        for stage in range(cfg.num_stages):
            rng = np.random.default_rng(cfg.seed + offset + stage)
            for _ in range(cfg.epochs):
                expected.append([b.indices for b in uniform_batches(n, cfg.batch_size, rng)])
    assert seen == expected


def test_flags_off_ignores_miner_settings(separable_dataset, small_config):
    cfg = small_config.model_copy(update={"ablation": AblationFlags.for_cell("CFL-MLP")})
    other_miner = cfg.model_copy(update={
        "miner": MinerConfig(p_random=0.0, exclude_in_batch=True, candidate_pool=5),
    })
    a = run_pipeline(separable_dataset, cfg).report
    b = run_pipeline(separable_dataset, other_miner).report
    assert a.model_dump_json() == b.model_dump_json()


# --- pipeline and experiments ---


def test_pipeline_reports_metrics(separable_dataset, small_config):
    result = run_pipeline(separable_dataset, small_config)
    report = result.report
    assert report.cell == "HSMCFL"
    assert report.val is not None and report.test is not None
    test = separable_dataset.subset(SplitTag.TEST)
    assert report.test == evaluate_split(result.model.encoder, result.classifier, test)
    assert set(report.stage_seconds) == {"cfl", "mlp"}
    assert "stage_seconds" not in report.model_dump_json()


def test_pipeline_is_deterministic(separable_dataset, small_config):
    a = run_pipeline(separable_dataset, small_config).report
    b = run_pipeline(separable_dataset, small_config).report
    assert a.model_dump_json() == b.model_dump_json()


def test_baseline_cell_skips_contrastive_stage(separable_dataset, small_config):
    cfg = small_config.model_copy(update={"ablation": AblationFlags.for_cell(BASELINE_CELL)})
    result = run_pipeline(separable_dataset, cfg)
    assert result.report.cell == BASELINE_CELL
    assert result.report.cfl_loss == []
    assert result.model.projection is None
    np.testing.assert_array_equal(result.model.encoder.weights[0], np.eye(separable_dataset.feature_count))


def test_cell_names_round_trip():
    for cell in (*CELLS, BASELINE_CELL):
        assert AblationFlags.for_cell(cell).cell == cell
    with pytest.raises(ValueError):
        AblationFlags.for_cell("nope")


def test_single_repeat_equals_single_run(separable_dataset, small_config):
    report = run_experiment(separable_dataset, small_config, repeats=1)
    (summary,) = report.cells
    run = run_pipeline(separable_dataset, small_config).report
    assert summary.seeds == [small_config.seed]
    assert summary.accuracy_mean == run.test.accuracy
    assert summary.macro_gmean_mean == run.test.macro_gmean
    assert summary.accuracy_std == 0.0 and summary.macro_gmean_std == 0.0


def test_identical_runs_have_zero_spread(separable_dataset, small_config):
    run = run_pipeline(separable_dataset, small_config).report
    summary = summarize("HSMCFL", [run, run])
    assert summary.macro_gmean_std == 0.0
    assert summary.accuracy_mean == run.test.accuracy


def test_experiment_keeps_cell_and_seed_order(separable_dataset, small_config):
    cfg = small_config.model_copy(update={"epochs": 1, "num_stages": 1, "seed": 5})
    report = run_experiment(separable_dataset, cfg, repeats=2, cells=CELLS)
    assert [s.cell for s in report.cells] == list(CELLS)
    for summary in report.cells:
        assert summary.seeds == [5, 6]
        assert [r.cell for r in summary.runs] == [summary.cell] * 2
    assert report.cell("CFL-MLP").cell == "CFL-MLP"


def test_experiment_needs_test_split(small_config):
    ds = generate_synthetic(load_config(None, ["synthetic.class_sizes=[20,20]", "synthetic.class_count=2"]).synthetic)
    with pytest.raises(DataError):
        run_experiment(ds, small_config, repeats=1)
    with pytest.raises(ValueError):
        run_experiment(normalize_minmax(split(ds)), small_config, repeats=0)


# --- embeddings ---


def test_export_embeddings_shape_and_values(tmp_path, separable_dataset, small_config):
    encoder = train_cfl(separable_dataset, small_config).model.encoder
    three = dataclasses.replace(
        separable_dataset,
        features=separable_dataset.features[:3],
        labels=separable_dataset.labels[:3],
        timestamp_index=None,
        split_assignment=None,
    )
    path = export_embeddings(encoder, three, tmp_path / "emb.csv")
    frame = pd.read_csv(path)
    assert frame.shape == (3, encoder.out_dim + 1)
    assert list(frame.columns[-1:]) == ["label"]
    np.testing.assert_allclose(frame.iloc[:, :-1].to_numpy(), encoder(three.features), atol=1e-9)


def test_export_embeddings_empty_split(tmp_path, separable_dataset):
    ds = split(separable_dataset, val_frac_of_train=0.0)
    encoder = identity_network(ds.feature_count)
    path = export_embeddings(encoder, ds, tmp_path / "emb.csv", split=SplitTag.VAL)
    frame = pd.read_csv(path)
    assert len(frame) == 0
    assert frame.shape[1] == ds.feature_count + 1


def test_export_embeddings_dimension_check(tmp_path, separable_dataset):
    with pytest.raises(Exception, match="features"):
        export_embeddings(identity_network(2), separable_dataset, tmp_path / "emb.csv")


# --- directional ablation on the bundled overlapping set ---


@pytest.mark.slow
def test_hsmcfl_leads_the_ablation():
    cfg = load_config(CONFIG_DIR / "synthetic_overlap.toml")
    ds = generate_synthetic(cfg.synthetic)
    d = cfg.data
    ds = normalize_minmax(split(
        ds, d.train_frac, d.test_frac, d.val_frac_of_train, d.split_seed, d.stratified,
    ))
    report = run_experiment(ds, cfg.train, repeats=cfg.repeats, cells=[*CELLS, BASELINE_CELL])
    score = {s.cell: s.macro_gmean_mean for s in report.cells}
    # drift keeps a plain MLP from separating the conditions
    assert score[BASELINE_CELL] <= 0.93
    assert score["HSMCFL"] - score["CFL-MLP"] >= 0.01
    assert score["HSMCFL"] >= score["HSM+CFL-MLP"]
    assert score["HSMCFL"] >= score["CFL-HSM+MLP"]
