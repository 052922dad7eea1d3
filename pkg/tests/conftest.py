"""Shared fixtures for the test suite.

The end-to-end training runs are expensive (tens of seconds each), so
they are session scoped: every test that needs a converged model shares
the same deterministic run.  Wall-clock times are recorded on the
fixtures because several tests assert runtime budgets.
"""

import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from crisp import (
    CorruptionConfig,
    CrispModel,
    Dataset,
    EvalReport,
    LatentBank,
    ModelConfig,
    TrainConfig,
    TrainHistory,
    build_bank,
    corrupt_mask,
    crisp_uncertainty,
    edge_uncertainty,
    evaluate,
    generate_dataset,
    split_indices,
    train,
)

CLI_TIMEOUT = 300.0


@dataclass
class TrainedRun:
    """A dataset, the model fitted on it, and how long that took."""

    dataset: Dataset
    model: CrispModel
    history: TrainHistory
    model_config: ModelConfig
    train_config: TrainConfig
    seconds: float

    @property
    def train_samples(self) -> list:
        idx, _ = split_indices(len(self.dataset.samples), self.train_config)
        return [self.dataset.samples[i] for i in idx]

    @property
    def val_samples(self) -> list:
        _, idx = split_indices(len(self.dataset.samples), self.train_config)
        return [self.dataset.samples[i] for i in idx]


def _fit(dataset: Dataset, model_config: ModelConfig,
         train_config: TrainConfig) -> TrainedRun:
    start = time.monotonic()
    model, history = train(dataset, model_config, train_config)
    seconds = time.monotonic() - start
    return TrainedRun(dataset, model, history, model_config,
                      train_config, seconds)


@pytest.fixture(scope="session")
def main_run() -> TrainedRun:
    """Workhorse model: 200 noisy 32x32 three-class samples."""
    dataset = generate_dataset(200, 32, 32, 3, seed=7)
    return _fit(dataset, ModelConfig(32, 32, 3),
                TrainConfig(max_epochs=400, patience=30, seed=0))


@pytest.fixture(scope="session")
def noise_free_run() -> TrainedRun:
    """Same geometry trained on noise-free images."""
    dataset = generate_dataset(200, 32, 32, 3, seed=11, noise_sigma=0.0)
    return _fit(dataset, ModelConfig(32, 32, 3),
                TrainConfig(max_epochs=400, patience=50, seed=0))


@dataclass
class Pipeline:
    """Full uncertainty pipeline built on top of the workhorse model.

    A bank of 250 ground-truth masks (training set plus a held-out
    batch), 100 fresh test samples, corrupted predictions of mixed
    severity, and uncertainty maps plus evaluation reports for both the
    retrieval method and the edge baseline.
    """

    run: TrainedRun
    bank: LatentBank
    test_samples: list
    predictions: list
    crisp_maps: list
    edge_maps: list
    crisp_report: EvalReport
    edge_report: EvalReport
    seconds: float


@pytest.fixture(scope="session")
def eval_pipeline(main_run: TrainedRun) -> Pipeline:
    start = time.monotonic()
    extra = generate_dataset(50, 32, 32, 3, seed=8)
    test = generate_dataset(100, 32, 32, 3, seed=9)
    bank_masks = [s.mask for s in main_run.dataset.samples]
    bank_masks += [s.mask for s in extra.samples]
    bank = build_bank(bank_masks, main_run.model)

    severities = (0, 1, 2, 3, 4)
    rng = np.random.default_rng(123)
    predictions = []
    for sample in test.samples:
        severity = severities[int(rng.integers(len(severities)))]
        sub_seed = int(rng.integers(2 ** 32))
        predictions.append(corrupt_mask(
            sample.mask, CorruptionConfig(severity=severity, seed=sub_seed)
        ))

    crisp_maps = [
        crisp_uncertainty(sample.image, pred, main_run.model, bank)
        for sample, pred in zip(test.samples, predictions)
    ]
    edge_maps = [edge_uncertainty(pred) for pred in predictions]
    crisp_report = evaluate(test.samples, predictions, crisp_maps)
    edge_report = evaluate(test.samples, predictions, edge_maps)
    seconds = time.monotonic() - start
    return Pipeline(main_run, bank, test.samples, predictions,
                    crisp_maps, edge_maps, crisp_report, edge_report,
                    seconds)


def run_cli(*args, cwd=None) -> subprocess.CompletedProcess:
    """Invoke the installed CLI in a subprocess and capture its output."""
    return subprocess.run(
        [sys.executable, "-m", "crisp", *[str(a) for a in args]],
        cwd=cwd, capture_output=True, text=True, timeout=CLI_TIMEOUT,
    )


@pytest.fixture(scope="session")
def cli():
    return run_cli


@dataclass
class CliWorkspace:
    """Generated datasets plus a small trained checkpoint on disk."""

    root: Path
    data_dir: Path
    train_dir: Path

    @property
    def train_data(self) -> Path:
        return self.data_dir / "train.crspds"

    @property
    def val_data(self) -> Path:
        return self.data_dir / "val.crspds"

    @property
    def test_data(self) -> Path:
        return self.data_dir / "test.crspds"

    @property
    def checkpoint(self) -> Path:
        return self.train_dir / "model.crspmd"


TINY_TRAIN_ARGS = (
    "--d-x", 8, "--d-y", 8, "--d-h", 4, "--hidden", 16,
    "--batch-size", 8, "--max-epochs", 8, "--patience", 8, "--seed", 0,
)


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory) -> CliWorkspace:
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    result = run_cli("gen-data", "--out", data_dir, "--count", 48,
                     "--size", 16, "--classes", 3, "--seed", 5)
    assert result.returncode == 0, result.stderr
    train_dir = root / "run"
    result = run_cli("train", "--data", data_dir / "train.crspds",
                     "--out", train_dir, *TINY_TRAIN_ARGS)
    assert result.returncode == 0, result.stderr
    return CliWorkspace(root=root, data_dir=data_dir, train_dir=train_dir)
