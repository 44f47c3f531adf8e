import json

import pandas as pd
import pytest
from click.testing import CliRunner

from hsmcfl.cli import main
from hsmcfl.train import BASELINE_CELL, CELLS


@pytest.fixture
def runner():
    return CliRunner()


def _invoke(runner, *args):
    return runner.invoke(main, [str(a) for a in args])


def _train(runner, smoke_config, out, *extra):
    result = _invoke(runner, "train", "-c", smoke_config, "-o", out, *extra)
    assert result.exit_code == 0, result.output
    return result


def test_generate_writes_dataset_and_sidecar(runner, smoke_config, tmp_path):
    result = _invoke(runner, "generate", "-c", smoke_config, "-o", tmp_path)
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(tmp_path / "dataset.csv")
    assert len(frame) == 40 + 20 + 10
    assert frame.shape[1] == 4 + 1
    meta = json.loads((tmp_path / "dataset.meta.json").read_text())
    assert meta["class_count"] == 3
    assert meta["synthetic_spec"]["class_sizes"] == [40, 20, 10]


def test_generate_is_reproducible(runner, smoke_config, tmp_path):
    for name in ("a", "b"):
        assert _invoke(runner, "generate", "-c", smoke_config, "-o", tmp_path / name, "--seed", 3).exit_code == 0
    assert (tmp_path / "a" / "dataset.csv").read_bytes() == (tmp_path / "b" / "dataset.csv").read_bytes()


def test_generate_seed_changes_data(runner, smoke_config, tmp_path):
    _invoke(runner, "generate", "-c", smoke_config, "-o", tmp_path / "a", "--seed", 1)
    _invoke(runner, "generate", "-c", smoke_config, "-o", tmp_path / "b", "--seed", 2)
    assert (tmp_path / "a" / "dataset.csv").read_bytes() != (tmp_path / "b" / "dataset.csv").read_bytes()


def test_generate_rejects_empty_class(runner, smoke_config, tmp_path):
    result = _invoke(
        runner, "generate", "-c", smoke_config, "-o", tmp_path,
        "--override", "synthetic.class_sizes=[40,0,10]",
    )
    assert result.exit_code != 0
    assert "positive" in result.output
    assert not (tmp_path / "dataset.csv").exists()


def test_train_writes_every_artifact(runner, smoke_config, tmp_path):
    _train(runner, smoke_config, tmp_path)
    for name in (
        "encoder.ckpt", "classifier.ckpt", "report.json", "confusion_test.csv",
        "embeddings.csv", "split.json", "manifest.json", "dataset.csv",
    ):
        assert (tmp_path / name).exists(), name

    report = json.loads((tmp_path / "report.json").read_text())
    assert report["cell"] == "HSMCFL"
    assert "stage_seconds" not in report
    assert report["test"]["confusion"]

    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {s["status"] for s in manifest["stages"].values()} == {"completed"}
    assert set(manifest["stage_seconds"]) == {"load", "cfl", "mlp", "export"}

    embeddings = pd.read_csv(tmp_path / "embeddings.csv")
    assert len(embeddings) == 70
    assert embeddings.shape[1] == 16 + 1


def test_train_flag_overrides_name_the_cell(runner, smoke_config, tmp_path):
    _train(
        runner, smoke_config, tmp_path,
        "--override", "train.ablation.hsm_in_cfl=false,train.ablation.hsm_in_mlp=false",
    )
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["cell"] == "CFL-MLP"


def test_train_is_reproducible(runner, smoke_config, tmp_path):
    _train(runner, smoke_config, tmp_path / "a")
    _train(runner, smoke_config, tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_train_from_csv(runner, smoke_config, tmp_path):
    assert _invoke(runner, "generate", "-c", smoke_config, "-o", tmp_path / "data").exit_code == 0
    _train(runner, smoke_config, tmp_path / "run", "--data", tmp_path / "data" / "dataset.csv")
    split = json.loads((tmp_path / "run" / "split.json").read_text())
    assert split["source_csv"].endswith("dataset.csv")
    assert len(split["split_assignment"]) == 70


def test_train_rejects_oversized_batch(runner, smoke_config, tmp_path):
    result = _invoke(runner, "train", "-c", smoke_config, "-o", tmp_path, "--override", "train.batch_size=500")
    assert result.exit_code == 1
    assert "batch_size" in result.output
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["stages"]["cfl"]["status"] == "failed"


def test_evaluate_matches_training_report(runner, smoke_config, tmp_path):
    _train(runner, smoke_config, tmp_path)
    result = _invoke(runner, "evaluate", "--run", tmp_path)
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "report.json").read_text())
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics == report["test"]


def test_evaluate_rejects_wrong_feature_count(runner, smoke_config, tmp_path, write_csv):
    _train(runner, smoke_config, tmp_path / "run")
    bad = write_csv("a,b,c,label\n0.1,0.2,0.3,0\n0.4,0.5,0.6,1\n0.7,0.8,0.9,2\n", "narrow.csv")
    result = _invoke(runner, "evaluate", "--run", tmp_path / "run", "--data", bad)
    assert result.exit_code != 0
    assert "expects 4 features" in result.output


def test_evaluate_needs_a_run_directory(runner, tmp_path):
    result = _invoke(runner, "evaluate", "--run", tmp_path / "missing")
    assert result.exit_code == 1
    assert "does not exist" in result.output


def test_ablate_writes_one_row_per_cell(runner, smoke_config, tmp_path):
    result = _invoke(runner, "ablate", "-c", smoke_config, "-o", tmp_path, "--repeats", 1)
    assert result.exit_code == 0, result.output
    table = pd.read_csv(tmp_path / "ablation_table.csv")
    assert list(table["cell"]) == list(CELLS)
    assert list(table.columns) == [
        "cell", "repeats", "macro_gmean_mean", "macro_gmean_std", "accuracy_mean", "accuracy_std",
    ]
    assert (table["macro_gmean_std"] == 0).all()
    report = json.loads((tmp_path / "ablation.json").read_text())
    assert [c["cell"] for c in report["cells"]] == list(CELLS)


def test_ablate_with_baseline(runner, smoke_config, tmp_path):
    result = _invoke(runner, "ablate", "-c", smoke_config, "-o", tmp_path, "--repeats", 1, "--with-baseline")
    assert result.exit_code == 0, result.output
    table = pd.read_csv(tmp_path / "ablation_table.csv")
    assert list(table["cell"]) == [*CELLS, BASELINE_CELL]


def test_ablate_rejects_zero_repeats(runner, smoke_config, tmp_path):
    result = _invoke(runner, "ablate", "-c", smoke_config, "-o", tmp_path, "--repeats", 0)
    assert result.exit_code == 2


def test_mine_debug_dumps_batches(runner, smoke_config, tmp_path):
    result = _invoke(runner, "mine-debug", "-c", smoke_config, "-o", tmp_path)
    assert result.exit_code == 0, result.output
    lines = (tmp_path / "batches.jsonl").read_text().splitlines()
    # 39 training rows, batch size 8
    assert len(lines) == 4
    first = json.loads(lines[0])
    assert len(first["indices"]) == 8
    assert len(first["provenance"]) == 8
    assert first["provenance"][:3] == ["init"] * 3


def test_missing_config_fails(runner, tmp_path):
    result = _invoke(runner, "train", "-c", tmp_path / "nope.toml", "-o", tmp_path)
    assert result.exit_code == 1
    assert "does not exist" in result.output


def test_invalid_override_fails(runner, smoke_config, tmp_path):
    result = _invoke(runner, "train", "-c", smoke_config, "-o", tmp_path, "--override", "train.epochs=-1")
    assert result.exit_code == 1
    assert "train.epochs" in result.output
