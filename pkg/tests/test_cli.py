"""CLI surface: generation, training, ablation, benchmarks."""
import json
import os

import pytest
from click.testing import CliRunner

from medbox.cli import main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, runner):
    out = tmp_path_factory.mktemp("cli_ds")
    result = runner.invoke(main, ["generate", "--classes", "3", "--per-class", "4",
                                  "--seed", "1", "--image-size", "32",
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_generate_writes_dataset_and_catalog(dataset_dir):
    assert (dataset_dir / "manifest.json").exists()
    assert (dataset_dir / "catalog.json").exists()
    catalog = json.loads((dataset_dir / "catalog.json").read_text())
    assert len(catalog) == 3
    assert {"id", "name", "posology", "pil", "class_index"} <= set(catalog[0])


def test_train_then_bench(runner, dataset_dir, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "epochs": 2, "base_lr": 0.05, "lr_drops": [], "weight_decay": 5e-4,
        "momentum": 0.9, "batch_size": 8, "freeze_policy": "full", "seed": 0,
    }))
    model = tmp_path / "model.nbx"
    log = tmp_path / "log.csv"
    result = runner.invoke(main, [
        "train", "--manifest", str(dataset_dir / "manifest.json"),
        "--config", str(cfg), "--growth-rate", "4", "--blocks", "1,1",
        "--image-size", "32", "--model-out", str(model), "--log-out", str(log),
    ])
    assert result.exit_code == 0, result.output
    assert model.exists()
    assert log.read_text().startswith("epoch,lr,loss,train_acc")

    bench_result = runner.invoke(main, [
        "bench", "--model", str(model), "--catalog", str(dataset_dir / "catalog.json"),
        "--manifest", str(dataset_dir / "manifest.json"), "--iterations", "5",
    ])
    assert bench_result.exit_code == 0, bench_result.output
    assert "p50" in bench_result.output


def test_ablate_emits_reports(runner, dataset_dir, tmp_path):
    out = tmp_path / "report"
    result = runner.invoke(main, [
        "ablate", "--manifest", str(dataset_dir / "manifest.json"),
        "--grid", "k=2,4", "--phi", "0.5", "--blocks", "1,1",
        "--image-size", "32", "--epochs", "2", "--repetitions", "1",
        "--workers", "1", "--out", str(out),
    ])
    assert result.exit_code == 0, result.output
    assert (out / "ablation.csv").exists()
    assert (out / "ablation.txt").exists()
    assert (out / "confusion_k2-phi0.5.csv").exists()
    assert (out / "confusion_k4-phi0.5.ppm").exists()
    lines = (out / "ablation.csv").read_text().strip().splitlines()
    assert len(lines) == 3  # header + one row per grid entry


def test_bench_kernels_smoke(runner):
    result = runner.invoke(main, ["bench-kernels", "--repeats", "1"])
    assert result.exit_code == 0, result.output
    assert "kernel" in result.output
    assert "numba" in result.output
