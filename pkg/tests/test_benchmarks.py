"""End-to-end benchmark checks on MNIST and synthetic blobs.

These run full multi-seed experiments and are marked slow. The MNIST checks
need the four IDX files under ``$ACTIVELEARN_MNIST_DIR``.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import replace
import os
from pathlib import Path
from typing import Dict, List

import pytest

from activelearn.cli import cmd_run, cmd_sweep
from activelearn.loop import RunRecord, StepAggregate, aggregate_runs
from activelearn.utils.config_parser import build_config, load_preset

MNIST_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)


def _mnist_available() -> bool:
    root = os.environ.get("ACTIVELEARN_MNIST_DIR")
    return bool(root) and all((Path(root) / name).is_file() for name in MNIST_FILES)


requires_mnist = pytest.mark.skipif(not _mnist_available(), reason="ACTIVELEARN_MNIST_DIR with IDX files not set")


def _by_key(records: List[RunRecord], key) -> Dict[str, List[StepAggregate]]:
    grouped: Dict[str, List[RunRecord]] = defaultdict(list)
    for record in records:
        grouped[key(record)].append(record)
    return {name: aggregate_runs(group) for name, group in grouped.items()}


@pytest.mark.slow
@requires_mnist
def test_ours_selects_more_mistakes_than_dropout_baselines(tmp_path) -> None:
    config = build_config(load_preset("mnist-mistakes"), {"output_dir": str(tmp_path)})
    config = replace(config, strategies=("ours", "bald", "mc_dropout"))
    stats = _by_key(cmd_run(config), lambda record: record.strategy)

    ours, bald, dropout = stats["ours"], stats["bald"], stats["mc_dropout"]
    assert ours[1].mistake_rate_mean >= 0.80
    assert ours[1].mistake_rate_mean > bald[1].mistake_rate_mean
    assert ours[1].mistake_rate_mean > dropout[1].mistake_rate_mean
    for step in (5, 10):
        assert ours[step].mistake_rate_mean >= dropout[step].mistake_rate_mean


@pytest.mark.slow
@requires_mnist
def test_ours_saves_annotations_on_imbalanced_mnist(tmp_path) -> None:
    config = build_config(load_preset("mnist-imbalanced"), {"output_dir": str(tmp_path)})
    config = replace(config, strategies=("random", "ours"))
    stats = _by_key(cmd_run(config), lambda record: record.strategy)

    ours, random = stats["ours"], stats["random"]
    assert ours[5].test_accuracy_mean >= random[10].test_accuracy_mean - 0.01
    assert ours[-1].test_accuracy_mean > random[-1].test_accuracy_mean


@pytest.mark.slow
def test_few_holdout_samples_per_class_suffice(tmp_path) -> None:
    config = build_config(load_preset("blobs-holdout-ablation"), {"output_dir": str(tmp_path)})
    stats = _by_key(cmd_sweep(config, workers=4), lambda record: record.dataset)

    few, many = stats["blobs10[holdout=3]"], stats["blobs10[holdout=20]"]
    assert len(few) == len(many) == config.loop.steps + 1
    assert abs(few[-1].test_accuracy_mean - many[-1].test_accuracy_mean) <= 0.02


@pytest.mark.slow
def test_sweep_is_byte_identical_across_executions(tmp_path) -> None:
    outputs = []
    for attempt in ("first", "second"):
        config = build_config(load_preset("blobs-smoke"), {"output_dir": str(tmp_path / attempt)})
        cmd_sweep(config, workers=3)
        outputs.append((tmp_path / attempt / "results.csv").read_bytes())
    assert outputs[0] == outputs[1]
