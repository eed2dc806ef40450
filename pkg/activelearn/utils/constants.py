"""Shared constants and declared defaults for the active-learning toolkit."""
from __future__ import annotations

import os
from pathlib import Path

import yaml
from dotenv import load_dotenv

load_dotenv()

SETTINGS_PATH = Path(__file__).resolve().parents[1] / "config" / "experiment-settings.yaml"
OUTPUT_DIR_ENV_VAR = "ACTIVELEARN_OUTPUT_DIR"
_FALLBACK_OUTPUT_DIR = "results"

# Adam defaults.
ADAM_LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Network defaults: input -> 256 -> classes, rectifier, dropout for MC passes.
DEFAULT_HIDDEN_DIMS = (256,)
DEFAULT_DROPOUT_RATE = 0.25

# Training loop defaults.
DEFAULT_MAX_EPOCHS = 200
DEFAULT_PATIENCE = 10
DEFAULT_BATCH_SIZE = 32

# Acquisition defaults.
DEFAULT_ETA = 1e-3
DEFAULT_INNER_ITERATIONS = 3
DEFAULT_MC_PASSES = 25
DEFAULT_ERR_SUBSET_SIZE = 1000

# Split defaults.
DEFAULT_TEST_FRACTION = 0.2
DEFAULT_MINORITY_FRACTION = 0.1
DEFAULT_HOLDOUT_TO_INITIAL_RATIO = 0.2
BALANCED_STEP_FRACTION = 0.1
IMBALANCED_STEP_FRACTION = 0.2

RESULTS_CSV_NAME = "results.csv"
RUNS_DIR_NAME = "runs"
RESOLVED_CONFIG_NAME = "config.json"
CSV_COLUMNS = (
    "dataset",
    "strategy",
    "seed",
    "step",
    "train_size",
    "test_accuracy",
    "holdout_loss",
    "mistake_rate",
)
CSV_FLOAT_FORMAT = "%.6f"


def default_output_dir() -> str:
    """Output directory from the environment, falling back to ``results``."""
    return os.environ.get(OUTPUT_DIR_ENV_VAR) or _FALLBACK_OUTPUT_DIR


def default_preset_name(settings_path: Path = SETTINGS_PATH) -> str:
    """Determine which preset ``run --preset`` falls back to.

    Args:
        settings_path: Preset YAML to inspect.

    Returns:
        Name of the default preset.

    Raises:
        RuntimeError: If the file lacks presets or references a missing one.
    """
    with settings_path.open("r", encoding="utf-8") as fh:
        settings = yaml.safe_load(fh) or {}

    presets = settings.get("presets") or {}
    if not presets:
        raise RuntimeError(f"No presets defined in {settings_path}")

    target = settings.get("default_preset")
    if target:
        if target not in presets:
            raise RuntimeError(f"Configured default preset '{target}' missing from {settings_path}")
        return target
    return next(iter(presets))
