"""Active-learning engine: training to convergence, acquisition steps, metrics and aggregation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
import logging
import time
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, LabeledView, Split, labeled_view, oracle_annotate, pool_view
from .nn_core import (
    ForwardMode,
    GradientScope,
    MlpModel,
    ModelSnapshot,
    Network,
    NNError,
    OptimizerState,
    adam_step,
    backward,
    forward,
    softmax_xent,
)
from .strategies import (
    ConfigurationError,
    StrategyParams,
    build_holdout_cache,
    needs_holdout,
    select,
)
from .utils.constants import (
    ADAM_LEARNING_RATE,
    DEFAULT_BATCH_SIZE,
    DEFAULT_DROPOUT_RATE,
    DEFAULT_HIDDEN_DIMS,
    DEFAULT_MAX_EPOCHS,
    DEFAULT_PATIENCE,
)

logger = logging.getLogger(__name__)

# Stream tags mixed into per-step seeds.
_TRAIN_STREAM = 0
_SELECT_STREAM = 1
_INIT_STREAM = 2


class RetrainMode(str, Enum):
    CONTINUE = "continue"
    SCRATCH = "scratch"


class TrainingError(RuntimeError):
    """Raised when training diverges; ``epoch`` is 1-based (0 before the first epoch)."""

    def __init__(self, message: str, epoch: int) -> None:
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class AggregationError(ValueError):
    """Raised when run records cannot be aggregated together."""


@dataclass(frozen=True)
class LoopConfig:
    """Protocol for one active-learning run: S steps of K annotations with a fixed strategy."""

    steps: int
    step_size: int
    strategy: str = "random"
    strategy_params: StrategyParams = field(default_factory=StrategyParams)
    patience: int = DEFAULT_PATIENCE
    max_epochs: int = DEFAULT_MAX_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    retrain_mode: RetrainMode = RetrainMode.CONTINUE
    seed: int = 0
    hidden_dims: Tuple[int, ...] = DEFAULT_HIDDEN_DIMS
    dropout_rate: float = DEFAULT_DROPOUT_RATE
    learning_rate: float = ADAM_LEARNING_RATE

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.step_size < 1:
            raise ConfigurationError("step_size must be >= 1")
        if self.patience < 0:
            raise ConfigurationError("patience must be >= 0")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        object.__setattr__(self, "retrain_mode", RetrainMode(self.retrain_mode))
        object.__setattr__(self, "hidden_dims", tuple(int(dim) for dim in self.hidden_dims))

    def to_dict(self) -> Dict[str, Any]:
        echo = asdict(self)
        echo["retrain_mode"] = self.retrain_mode.value
        echo["hidden_dims"] = list(self.hidden_dims)
        return echo


@dataclass(frozen=True)
class TrainResult:
    epochs: int
    best_holdout_loss: float


@dataclass(frozen=True)
class StepRecord:
    """Measurements after step ``step``; ``holdout_loss`` is the mean per-sample loss.

    ``selected_wrong`` follows ``selected_indices`` and flags the samples the
    selection-time model predicted wrongly. ``epochs`` counts the training
    epochs that produced the measured model.
    """

    step: int
    train_size: int
    test_accuracy: float
    holdout_loss: float
    mistake_selection_rate: Optional[float]
    selected_indices: Tuple[int, ...] = ()
    selected_wrong: Tuple[bool, ...] = ()
    epochs: int = 0
    wall_time_ms: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["selected_indices"] = list(self.selected_indices)
        payload["selected_wrong"] = list(self.selected_wrong)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "StepRecord":
        rate = payload.get("mistake_selection_rate")
        return cls(
            step=int(payload["step"]),
            train_size=int(payload["train_size"]),
            test_accuracy=float(payload["test_accuracy"]),
            holdout_loss=float(payload["holdout_loss"]),
            mistake_selection_rate=None if rate is None else float(rate),
            selected_indices=tuple(int(i) for i in payload.get("selected_indices", ())),
            selected_wrong=tuple(bool(flag) for flag in payload.get("selected_wrong", ())),
            epochs=int(payload.get("epochs", 0)),
            wall_time_ms=float(payload.get("wall_time_ms", 0.0)),
        )


@dataclass(frozen=True)
class RunRecord:
    """One run: the config echo, dataset name, seed and S + 1 step records (fewer when truncated)."""

    config: Dict[str, Any]
    dataset: str
    seed: int
    steps: Tuple[StepRecord, ...]
    truncated: bool = False

    @property
    def strategy(self) -> str:
        return str(self.config["strategy"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "dataset": self.dataset,
            "seed": self.seed,
            "truncated": self.truncated,
            "steps": [step.to_dict() for step in self.steps],
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "RunRecord":
        return cls(
            config=dict(payload["config"]),
            dataset=str(payload["dataset"]),
            seed=int(payload["seed"]),
            steps=tuple(StepRecord.from_dict(step) for step in payload["steps"]),
            truncated=bool(payload.get("truncated", False)),
        )


@dataclass(frozen=True)
class StepAggregate:
    step: int
    runs: int
    test_accuracy_mean: float
    test_accuracy_std: float
    mistake_rate_mean: Optional[float]
    mistake_rate_std: Optional[float]
    single_run: bool


def train_to_convergence(
    model: MlpModel,
    state: OptimizerState,
    train: LabeledView,
    holdout: LabeledView,
    cfg: LoopConfig,
    seed: int,
) -> TrainResult:
    """Mini-batch Adam with epoch-level early stopping on the holdout loss.

    Training stops once the holdout loss has not improved for ``cfg.patience``
    epochs (so patience 0 runs exactly one epoch) or after ``cfg.max_epochs``;
    the parameters of the best epoch are restored into ``model``. With an empty
    holdout set the training loss is monitored instead.

    Raises:
        TrainingError: On an empty training set or a non-finite loss.
    """
    if len(train) == 0:
        raise TrainingError("training set is empty", epoch=0)
    monitor = holdout if len(holdout) else train
    rng = np.random.default_rng(seed)
    batch = min(cfg.batch_size, len(train))

    best_loss = np.inf
    best = model.snapshot()
    wait = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(train), batch):
            rows = order[start : start + batch]
            try:
                logits, cache = forward(model, train.features[rows], ForwardMode.TRAIN, rng=rng)
            except NNError as exc:
                raise TrainingError(str(exc), epoch) from exc
            loss, _, _ = softmax_xent(logits, train.labels[rows])
            if not np.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch)
            grads = backward(model, cache, train.labels[rows], GradientScope.ALL_LAYERS)
            params, _ = adam_step(model.parameters(), grads, state)
            model.set_parameters(params)

        current = mean_loss(model, monitor)
        if not np.isfinite(current):
            raise TrainingError("non-finite holdout loss", epoch)
        if current < best_loss:
            best_loss, best, wait = current, model.snapshot(), 0
        else:
            wait += 1
        if wait >= cfg.patience:
            break

    model.load(best)
    logger.debug("trained %d epochs, best holdout loss %.6f", epoch, best_loss)
    return TrainResult(epochs=epoch, best_holdout_loss=float(best_loss))


def mean_loss(model: Network, view: LabeledView) -> float:
    try:
        logits, _ = forward(model, view.features, ForwardMode.EVAL)
    except NNError:
        return float("nan")
    loss, _, _ = softmax_xent(logits, view.labels)
    return loss


def evaluate_accuracy(model: Network, features: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose eval-mode argmax matches the label."""
    targets = np.asarray(labels, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("cannot evaluate accuracy on an empty set")
    logits, _ = forward(model, features, ForwardMode.EVAL)
    return float(np.mean(np.argmax(logits, axis=1) == targets))


def selected_mistakes(snapshot: ModelSnapshot, selected_features: np.ndarray, true_labels: Sequence[int]) -> np.ndarray:
    """Per selected sample: True where the snapshot's eval-mode argmax differs from the true label."""
    targets = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if targets.size == 0:
        return np.zeros(0, dtype=bool)
    logits, _ = forward(snapshot, selected_features, ForwardMode.EVAL)
    return np.argmax(logits, axis=1) != targets


def mistake_selection_rate(
    snapshot: ModelSnapshot, selected_features: np.ndarray, true_labels: Sequence[int]
) -> Optional[float]:
    """Share of selected samples the selection-time snapshot predicts wrongly; None if nothing was selected."""
    wrong = selected_mistakes(snapshot, selected_features, true_labels)
    return float(wrong.mean()) if wrong.size else None


def run_active_learning(dataset: Dataset, split: Split, cfg: LoopConfig) -> RunRecord:
    """Run S annotation steps of ``cfg.strategy`` starting from ``split``.

    Step 0 trains on the initial set. Each later step snapshots the model,
    selects K pool samples, scores the selection against true labels with that
    same snapshot, annotates, resets the Adam moments (or reinitialises the
    model for scratch retraining) and trains again. A pool smaller than K
    stops the run with ``truncated=True``.
    """
    needs_cache = needs_holdout(cfg.strategy)
    if split.test_idx.size == 0:
        raise ConfigurationError("split has no test samples")
    layer_dims = (dataset.dim, *cfg.hidden_dims, dataset.num_classes)
    model = MlpModel.initialize(layer_dims, _derive_seed(cfg.seed, 0, _INIT_STREAM), cfg.dropout_rate)
    state = OptimizerState.for_params(model.parameters(), cfg.learning_rate)
    holdout = labeled_view(dataset, split.holdout_idx)
    test = labeled_view(dataset, split.test_idx)

    started = time.perf_counter()
    trained = train_to_convergence(
        model, state, labeled_view(dataset, split.train_idx), holdout, cfg, _derive_seed(cfg.seed, 0, _TRAIN_STREAM)
    )
    records: List[StepRecord] = [
        _measure(model, split, holdout, test, 0, trained, rate=None, selected=(), wrong=(), started=started)
    ]

    truncated = False
    for step in range(1, cfg.steps + 1):
        if split.pool_idx.size < cfg.step_size:
            logger.warning(
                "pool exhausted at step=%d pool_size=%d step_size=%d; truncating run",
                step,
                split.pool_idx.size,
                cfg.step_size,
            )
            truncated = True
            break
        started = time.perf_counter()
        snapshot = model.snapshot()
        cache = build_holdout_cache(snapshot, holdout.features, holdout.labels) if needs_cache else None
        selection = select(
            cfg.strategy,
            snapshot,
            pool_view(dataset, split),
            cfg.step_size,
            _derive_seed(cfg.seed, step, _SELECT_STREAM),
            cfg.strategy_params,
            train_features=dataset.features[split.train_idx],
            holdout=cache,
        )
        chosen = selection.indices
        wrong = selected_mistakes(snapshot, dataset.features[chosen], dataset.labels[chosen])
        rate = mistake_selection_rate(snapshot, dataset.features[chosen], dataset.labels[chosen])
        for cand in selection.flag_mistakes(wrong).chosen_candidates():
            logger.debug(
                "selected step=%d index=%d score=%.6g pseudo_label=%d wrong=%s",
                step,
                cand.pool_index,
                cand.score,
                cand.pseudo_label,
                cand.eval_only_is_wrong,
            )
        split = oracle_annotate(split, chosen)

        if cfg.retrain_mode is RetrainMode.SCRATCH:
            model = MlpModel.initialize(layer_dims, _derive_seed(cfg.seed, step, _INIT_STREAM), cfg.dropout_rate)
            state = OptimizerState.for_params(model.parameters(), cfg.learning_rate)
        else:
            state.reset()
        trained = train_to_convergence(
            model,
            state,
            labeled_view(dataset, split.train_idx),
            holdout,
            cfg,
            _derive_seed(cfg.seed, step, _TRAIN_STREAM),
        )
        records.append(
            _measure(
                model, split, holdout, test, step, trained, rate=rate, selected=chosen, wrong=wrong, started=started
            )
        )

    return RunRecord(
        config=cfg.to_dict(),
        dataset=dataset.name,
        seed=cfg.seed,
        steps=tuple(records),
        truncated=truncated,
    )


def aggregate_runs(records: Sequence[RunRecord]) -> List[StepAggregate]:
    """Per-step mean and sample standard deviation across runs of one (dataset, strategy).

    Raises:
        AggregationError: If ``records`` is empty or mixes datasets or strategies.
    """
    if not records:
        raise AggregationError("no run records to aggregate")
    shapes = {(record.dataset, record.strategy) for record in records}
    if len(shapes) > 1:
        raise AggregationError(f"records mix dataset/strategy combinations: {sorted(shapes)}")
    series = {
        index: [(step.test_accuracy, step.mistake_selection_rate) for step in record.steps]
        for index, record in enumerate(records)
    }
    return aggregate_series(series)


def aggregate_series(series: Mapping[Any, Sequence[Tuple[float, Optional[float]]]]) -> List[StepAggregate]:
    """Aggregate per-run sequences of (test accuracy, mistake rate) aligned by step index.

    Runs of different length are cut to their common prefix with a warning.
    Values are sorted before reduction so run order never changes the result.
    """
    if not series:
        raise AggregationError("no runs to aggregate")
    lengths = {len(values) for values in series.values()}
    common = min(lengths)
    if len(lengths) > 1:
        logger.warning("runs have different step counts %s; aggregating common prefix of %d", sorted(lengths), common)
    runs = len(series)
    aggregates: List[StepAggregate] = []
    for step in range(common):
        accuracies = sorted(values[step][0] for values in series.values())
        rates = sorted(values[step][1] for values in series.values() if values[step][1] is not None)
        acc_mean, acc_std = _mean_std(accuracies)
        rate_mean, rate_std = _mean_std(rates) if rates else (None, None)
        aggregates.append(
            StepAggregate(
                step=step,
                runs=runs,
                test_accuracy_mean=acc_mean,
                test_accuracy_std=acc_std,
                mistake_rate_mean=rate_mean,
                mistake_rate_std=rate_std,
                single_run=runs == 1,
            )
        )
    return aggregates


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    array = np.asarray(values, dtype=np.float64)
    if array.size < 2:
        return float(array.mean()), 0.0
    return float(array.mean()), float(array.std(ddof=1))


def _measure(
    model: MlpModel,
    split: Split,
    holdout: LabeledView,
    test: LabeledView,
    step: int,
    trained: TrainResult,
    rate: Optional[float],
    selected: Sequence[int],
    wrong: Sequence[bool],
    started: float,
) -> StepRecord:
    accuracy = evaluate_accuracy(model, test.features, test.labels)
    holdout_loss = mean_loss(model, holdout) if len(holdout) else float("nan")
    record = StepRecord(
        step=step,
        train_size=int(split.train_idx.size),
        test_accuracy=accuracy,
        holdout_loss=holdout_loss,
        mistake_selection_rate=rate,
        selected_indices=tuple(int(i) for i in selected),
        selected_wrong=tuple(bool(flag) for flag in wrong),
        epochs=trained.epochs,
        wall_time_ms=(time.perf_counter() - started) * 1000.0,
    )
    logger.info(
        "step=%d train_size=%d epochs=%d best_loss=%.4f test_accuracy=%.4f holdout_loss=%.4f mistake_rate=%s",
        step,
        record.train_size,
        trained.epochs,
        trained.best_holdout_loss,
        accuracy,
        holdout_loss,
        "-" if rate is None else f"{rate:.4f}",
    )
    return record


def _derive_seed(seed: int, step: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, step, stream]).generate_state(1)[0])
