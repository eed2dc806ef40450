"""Experiment config loader: YAML/JSON documents and named presets into typed dataclasses."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
import math
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import yaml

from ..data import ImbalanceSpec, SplitSpec
from ..loop import LoopConfig, RetrainMode
from ..strategies import STRATEGY_IDS, StrategyParams, UnknownStrategyError
from .constants import (
    ADAM_LEARNING_RATE,
    DEFAULT_BATCH_SIZE,
    DEFAULT_DROPOUT_RATE,
    DEFAULT_HIDDEN_DIMS,
    DEFAULT_HOLDOUT_TO_INITIAL_RATIO,
    DEFAULT_MAX_EPOCHS,
    DEFAULT_MINORITY_FRACTION,
    DEFAULT_PATIENCE,
    DEFAULT_TEST_FRACTION,
    SETTINGS_PATH,
    default_output_dir,
    default_preset_name,
)

DATASET_KINDS = ("idx", "csv", "blobs")
SPLIT_MODES = ("balanced", "imbalanced")
_SCALAR_CASTS = {"int": int, "float": float}
_PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels", "path")
_TOP_LEVEL_KEYS = frozenset(
    {
        "name",
        "dataset",
        "split",
        "loop",
        "strategy_params",
        "strategies",
        "seeds",
        "holdout_per_class_values",
        "output_dir",
    }
)


class ConfigValidationError(ValueError):
    """Raised for an invalid config document; ``field`` is the dotted path of the offending key."""

    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class DatasetConfig:
    kind: str
    name: str
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    path: Optional[str] = None
    has_header: bool = False
    num_classes: int = 10
    per_class: int = 500
    dim: int = 2
    centers_seed: int = 0
    noise_sigma: float = 1.0
    sample_seed: int = 0


@dataclass(frozen=True)
class SplitConfig:
    mode: str = "balanced"
    initial_per_class: int = 5
    holdout_per_class: Optional[int] = None
    test_fraction: float = DEFAULT_TEST_FRACTION
    use_predefined_test: bool = True
    pool_per_class: Optional[int] = None
    minority_fraction: float = DEFAULT_MINORITY_FRACTION
    minority_class_count: Optional[int] = None
    random_minority: bool = False
    doubled_initial: bool = True
    holdout_to_initial_ratio: float = DEFAULT_HOLDOUT_TO_INITIAL_RATIO

    @property
    def imbalanced(self) -> bool:
        return self.mode == "imbalanced"


@dataclass(frozen=True)
class LoopSettings:
    steps: int = 10
    step_size: Optional[int] = None
    patience: int = DEFAULT_PATIENCE
    max_epochs: int = DEFAULT_MAX_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    retrain_mode: str = RetrainMode.CONTINUE.value
    hidden_dims: Tuple[int, ...] = DEFAULT_HIDDEN_DIMS
    dropout_rate: float = DEFAULT_DROPOUT_RATE
    learning_rate: float = ADAM_LEARNING_RATE


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment: dataset source, split protocol, loop, strategies and seeds."""

    name: str
    dataset: DatasetConfig
    split: SplitConfig
    loop: LoopSettings
    strategy_params: StrategyParams
    strategies: Tuple[str, ...]
    seeds: Tuple[int, ...]
    output_dir: str
    holdout_per_class_values: Optional[Tuple[int, ...]] = None

    def split_spec(self, seed: int, holdout_per_class: Optional[int] = None) -> SplitSpec:
        return SplitSpec(
            initial_per_class=self.split.initial_per_class,
            holdout_per_class=holdout_per_class if holdout_per_class is not None else self.split.holdout_per_class,
            test_fraction=self.split.test_fraction,
            use_predefined_test=self.split.use_predefined_test,
            pool_per_class=self.split.pool_per_class,
            seed=seed,
        )

    def imbalance_spec(self) -> ImbalanceSpec:
        return ImbalanceSpec(
            minority_fraction=self.split.minority_fraction,
            minority_class_count=self.split.minority_class_count,
            random_minority=self.split.random_minority,
            doubled_initial=self.split.doubled_initial,
            holdout_to_initial_ratio=self.split.holdout_to_initial_ratio,
        )

    def loop_config(self, strategy: str, seed: int, step_size: int) -> LoopConfig:
        return LoopConfig(
            steps=self.loop.steps,
            step_size=step_size,
            strategy=strategy,
            strategy_params=self.strategy_params,
            patience=self.loop.patience,
            max_epochs=self.loop.max_epochs,
            batch_size=self.loop.batch_size,
            retrain_mode=RetrainMode(self.loop.retrain_mode),
            seed=seed,
            hidden_dims=self.loop.hidden_dims,
            dropout_rate=self.loop.dropout_rate,
            learning_rate=self.loop.learning_rate,
        )

    def to_dict(self) -> Dict[str, Any]:
        echo = asdict(self)
        echo["strategies"] = list(self.strategies)
        echo["seeds"] = list(self.seeds)
        echo["loop"]["hidden_dims"] = list(self.loop.hidden_dims)
        if self.holdout_per_class_values is not None:
            echo["holdout_per_class_values"] = list(self.holdout_per_class_values)
        return echo


def load_document(path: Path) -> Dict[str, Any]:
    """Read a YAML or JSON config file (JSON is valid YAML)."""
    try:
        with Path(path).open("r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigValidationError("config", f"file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigValidationError("config", f"malformed document {path}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigValidationError("config", "document must be a mapping")
    return dict(raw)


def load_preset(preset: str, settings_path: Path = SETTINGS_PATH) -> Dict[str, Any]:
    """Return the raw document of a named preset from the settings file.

    Raises:
        ConfigValidationError: If the preset is missing.
    """
    raw = load_document(settings_path)
    presets: Mapping[str, dict] = raw.get("presets", {}) or {}
    if preset not in presets:
        raise ConfigValidationError("preset", f"unknown preset '{preset}'. Available: {', '.join(presets)}")
    document = dict(presets[preset])
    document.setdefault("name", preset)
    return document


def parse_config(
    path: Optional[Path] = None,
    preset: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    settings_path: Path = SETTINGS_PATH,
) -> ExperimentConfig:
    """Load and validate an experiment config.

    Args:
        path: Config document (YAML or JSON). Takes precedence over ``preset``.
        preset: Named preset from the settings file; the configured default is
            used when neither ``path`` nor ``preset`` is given.
        overrides: Flag values that replace document values. Recognised keys:
            ``seed``, ``strategy``, ``steps``, ``output_dir``.
        settings_path: Preset file location.

    Returns:
        ExperimentConfig with every default resolved.

    Raises:
        ConfigValidationError: Unknown key, out-of-range value or missing dataset file.
        UnknownStrategyError: A strategy id outside the registered set.
    """
    if path is not None:
        document = load_document(Path(path))
        document.setdefault("name", Path(path).stem)
    else:
        document = load_preset(preset or default_preset_name(settings_path), settings_path)
    return build_config(document, overrides)


def build_config(document: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    _reject_unknown(document, _TOP_LEVEL_KEYS, "")
    overrides = {key: value for key, value in (overrides or {}).items() if value is not None}

    dataset = _build_dataset(document.get("dataset"))
    split = _build_section(SplitConfig, document.get("split", {}), "split")
    loop = _build_section(LoopSettings, document.get("loop", {}), "loop")
    if "steps" in overrides:
        loop = replace(loop, steps=int(overrides["steps"]))
    params = _build_strategy_params(document.get("strategy_params", {}))

    strategies = _as_tuple(document.get("strategies", ("random",)), "strategies", "str")
    if "strategy" in overrides:
        strategies = (str(overrides["strategy"]),)
    seeds = _as_tuple(document.get("seeds", (0,)), "seeds", "int")
    if "seed" in overrides:
        seeds = (int(overrides["seed"]),)
    holdout_values = document.get("holdout_per_class_values")
    if holdout_values is not None:
        holdout_values = _as_tuple(holdout_values, "holdout_per_class_values", "int")
        if any(value < 1 for value in holdout_values):
            raise ConfigValidationError("holdout_per_class_values", "every value must be >= 1")

    output_dir = str(overrides.get("output_dir") or document.get("output_dir") or default_output_dir())
    config = ExperimentConfig(
        name=str(document.get("name", dataset.name)),
        dataset=dataset,
        split=split,
        loop=loop,
        strategy_params=params,
        strategies=strategies,
        seeds=seeds,
        output_dir=output_dir,
        holdout_per_class_values=holdout_values,
    )
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    if not config.strategies:
        raise ConfigValidationError("strategies", "at least one strategy is required")
    for strategy in config.strategies:
        if strategy not in STRATEGY_IDS:
            raise UnknownStrategyError(strategy)
    if not config.seeds:
        raise ConfigValidationError("seeds", "at least one seed is required")
    if any(seed < 0 for seed in config.seeds):
        raise ConfigValidationError("seeds", "seeds must be >= 0")

    split = config.split
    if split.mode not in SPLIT_MODES:
        raise ConfigValidationError("split.mode", f"must be one of {', '.join(SPLIT_MODES)}")
    _require(split.initial_per_class >= 1, "split.initial_per_class", "must be >= 1")
    _require(split.holdout_per_class is None or split.holdout_per_class >= 1, "split.holdout_per_class", "must be >= 1")
    _require(0.0 <= split.test_fraction < 1.0, "split.test_fraction", "must lie in [0, 1)")
    _require(0.0 < split.minority_fraction <= 1.0, "split.minority_fraction", "must lie in (0, 1]")
    _require(split.holdout_to_initial_ratio > 0.0, "split.holdout_to_initial_ratio", "must be > 0")

    loop = config.loop
    _require(loop.steps >= 0, "loop.steps", "must be >= 0")
    _require(loop.step_size is None or loop.step_size >= 1, "loop.step_size", "must be >= 1")
    _require(loop.patience >= 0, "loop.patience", "must be >= 0")
    _require(loop.max_epochs >= 1, "loop.max_epochs", "must be >= 1")
    _require(loop.batch_size >= 1, "loop.batch_size", "must be >= 1")
    _require(0.0 <= loop.dropout_rate < 1.0, "loop.dropout_rate", "must lie in [0, 1)")
    _require(loop.learning_rate > 0.0, "loop.learning_rate", "must be > 0")
    _require(all(dim >= 1 for dim in loop.hidden_dims), "loop.hidden_dims", "widths must be >= 1")
    if loop.retrain_mode not in {mode.value for mode in RetrainMode}:
        raise ConfigValidationError("loop.retrain_mode", f"must be one of {', '.join(m.value for m in RetrainMode)}")
    subsample = config.strategy_params.pool_subsample
    if subsample is not None and loop.step_size is not None:
        _require(
            subsample >= loop.step_size,
            "strategy_params.pool_subsample",
            f"must be >= loop.step_size ({loop.step_size})",
        )


def _build_dataset(raw: Any) -> DatasetConfig:
    if not isinstance(raw, Mapping):
        raise ConfigValidationError("dataset", "a dataset section is required")
    _reject_unknown(raw, {f.name for f in fields(DatasetConfig)}, "dataset")
    kind = raw.get("kind")
    if kind not in DATASET_KINDS:
        raise ConfigValidationError("dataset.kind", f"must be one of {', '.join(DATASET_KINDS)}")
    values = dict(raw)
    values.setdefault("name", kind)
    for key in _PATH_KEYS:
        if values.get(key):
            values[key] = os.path.expanduser(os.path.expandvars(str(values[key])))
    dataset = _build_section(DatasetConfig, values, "dataset")

    if kind == "idx":
        for key in ("train_images", "train_labels"):
            _require_file(getattr(dataset, key), f"dataset.{key}")
        if (dataset.test_images is None) != (dataset.test_labels is None):
            raise ConfigValidationError("dataset.test_images", "test_images and test_labels go together")
        if dataset.test_images is not None:
            _require_file(dataset.test_images, "dataset.test_images")
            _require_file(dataset.test_labels, "dataset.test_labels")
    elif kind == "csv":
        _require_file(dataset.path, "dataset.path")
    else:
        _require(dataset.num_classes >= 2, "dataset.num_classes", "must be >= 2")
        _require(dataset.per_class >= 1, "dataset.per_class", "must be >= 1")
        _require(dataset.dim >= 2, "dataset.dim", "must be >= 2")
        _require(dataset.noise_sigma >= 0.0, "dataset.noise_sigma", "must be >= 0")
    return dataset


def _build_strategy_params(raw: Any) -> StrategyParams:
    values = {**asdict(StrategyParams()), **_coerce_section(StrategyParams, raw, "strategy_params")}
    _require(values["eta"] >= 0.0, "strategy_params.eta", "must be >= 0")
    _require(values["inner_iterations"] >= 0, "strategy_params.inner_iterations", "must be >= 0")
    _require(values["mc_passes"] >= 1, "strategy_params.mc_passes", "must be >= 1")
    _require(values["err_subset_size"] >= 1, "strategy_params.err_subset_size", "must be >= 1")
    subsample = values["pool_subsample"]
    _require(subsample is None or subsample >= 1, "strategy_params.pool_subsample", "must be >= 1")
    _require(values["workers"] >= 1, "strategy_params.workers", "must be >= 1")
    return StrategyParams(**values)


def _build_section(cls: type, raw: Any, section: str) -> Any:
    values = _coerce_section(cls, raw, section)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError(section, str(exc)) from exc


def _coerce_section(cls: type, raw: Any, section: str) -> Dict[str, Any]:
    """Check keys against the dataclass fields of ``cls`` and cast each value to its declared type."""
    values = _as_mapping(raw, section)
    declared = {f.name: f.type for f in fields(cls)}
    _reject_unknown(values, declared, section)
    return {key: _coerce(value, _type_name(declared[key]), f"{section}.{key}") for key, value in values.items()}


def _coerce(value: Any, type_name: str, field_name: str) -> Any:
    optional = type_name.startswith("Optional[")
    base = type_name[len("Optional[") : -1] if optional else type_name
    if value is None:
        if optional:
            return None
        raise ConfigValidationError(field_name, "must not be null")
    if base.startswith("Tuple["):
        return _as_tuple(value, field_name, "int")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigValidationError(field_name, f"expected true or false, got {value!r}")
        return value
    if isinstance(value, (Mapping, list, tuple)):
        raise ConfigValidationError(field_name, f"expected a single {base} value, got {value!r}")
    if base == "str":
        return str(value)
    if isinstance(value, bool):
        raise ConfigValidationError(field_name, f"expected {base}, got {value!r}")
    try:
        result = _SCALAR_CASTS[base](value)
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError(field_name, f"expected {base}, got {value!r}") from exc
    if base == "int" and isinstance(value, float) and not value.is_integer():
        raise ConfigValidationError(field_name, f"expected int, got {value!r}")
    if base == "float" and not math.isfinite(result):
        raise ConfigValidationError(field_name, f"must be finite, got {value!r}")
    return result


def _type_name(declared: Any) -> str:
    return declared if isinstance(declared, str) else getattr(declared, "__name__", str(declared))


def _as_mapping(raw: Any, section: str) -> Dict[str, Any]:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigValidationError(section, "must be a mapping")
    return dict(raw)


def _as_tuple(raw: Any, field_name: str, item_type: str) -> Tuple[Any, ...]:
    items: Sequence[Any] = raw if isinstance(raw, (list, tuple)) else [raw]
    return tuple(_coerce(item, item_type, field_name) for item in items)


def _reject_unknown(values: Mapping[str, Any], allowed: Any, section: str) -> None:
    for key in values:
        if key not in allowed:
            dotted = f"{section}.{key}" if section else str(key)
            raise ConfigValidationError(dotted, "unknown key")


def _require(condition: bool, field_name: str, message: str) -> None:
    if not condition:
        raise ConfigValidationError(field_name, message)


def _require_file(value: Optional[str], field_name: str) -> None:
    if not value:
        raise ConfigValidationError(field_name, "is required")
    if not Path(value).expanduser().is_file():
        raise ConfigValidationError(field_name, f"file not found: {value}")
