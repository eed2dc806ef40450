"""Command-line entrypoints: ``run``, ``sweep`` and ``report``.

Exit codes: 0 on success, 1 for validation errors (config, dataset, strategy
ids, empty reports), 2 for any other runtime failure.
"""
from __future__ import annotations

import argparse
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
import logging
from pathlib import Path
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from .data import (
    Dataset,
    DatasetError,
    Split,
    annotation_step_size,
    load_csv,
    load_idx,
    load_idx_pair,
    make_blobs,
    make_imbalanced_split,
    make_split,
)
from .loop import RunRecord, aggregate_series, run_active_learning
from .storage import (
    atomic_write_text,
    load_results_frame,
    rebuild_results_csv,
    write_resolved_config,
    write_run_record,
)
from .strategies import StrategyError
from .utils.config_parser import ConfigValidationError, DatasetConfig, ExperimentConfig, parse_config
from .utils.constants import (
    CSV_FLOAT_FORMAT,
    RESOLVED_CONFIG_NAME,
    RESULTS_CSV_NAME,
    RUNS_DIR_NAME,
    default_output_dir,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

SUMMARY_CSV_NAME = "summary.csv"
MISTAKE_TABLE_CSV_NAME = "mistake_table.csv"
REPORT_TEXT_NAME = "report.txt"
# Steps shown in the mistake-rate table once a run has at least this many steps.
MISTAKE_TABLE_STEPS = (1, 5, 10)

_LOG_FORMAT = "ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s"


class ReportError(ValueError):
    """Raised when a results directory holds nothing to report."""


@dataclass(frozen=True)
class Job:
    """One (dataset variant, strategy, seed) run of a sweep."""

    strategy: str
    seed: int
    holdout_per_class: Optional[int] = None


def configure_logging(level: str = "INFO") -> None:
    """Install a single key=value formatter on the root logger."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(_LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level.upper())


def build_dataset(cfg: DatasetConfig) -> Dataset:
    if cfg.kind == "idx":
        if cfg.test_images is not None:
            return load_idx_pair(cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels, name=cfg.name)
        return load_idx(cfg.train_images, cfg.train_labels, name=cfg.name)
    if cfg.kind == "csv":
        return load_csv(cfg.path, has_header=cfg.has_header, name=cfg.name)
    return make_blobs(
        num_classes=cfg.num_classes,
        per_class_counts=cfg.per_class,
        dim=cfg.dim,
        centers_seed=cfg.centers_seed,
        noise_sigma=cfg.noise_sigma,
        sample_seed=cfg.sample_seed,
        name=cfg.name,
    )


def build_split(
    dataset: Dataset, config: ExperimentConfig, seed: int, holdout_per_class: Optional[int] = None
) -> Split:
    spec = config.split_spec(seed, holdout_per_class)
    if config.split.imbalanced:
        return make_imbalanced_split(dataset, spec, config.imbalance_spec())
    return make_split(dataset, spec)


def step_size_for(config: ExperimentConfig, num_classes: int) -> int:
    """Configured K, or 10% (balanced) / 20% (imbalanced) of the base initial set.

    Raises:
        ConfigValidationError: If the pool subsample cannot hold K samples.
    """
    if config.loop.step_size is not None:
        k = config.loop.step_size
    else:
        k = annotation_step_size(config.split.initial_per_class * num_classes, config.split.imbalanced)
    subsample = config.strategy_params.pool_subsample
    if subsample is not None and subsample < k:
        raise ConfigValidationError("strategy_params.pool_subsample", f"{subsample} is smaller than the step size {k}")
    return k


def prepare_runs(config: ExperimentConfig) -> Tuple[Dataset, int]:
    """Load the dataset, resolve K and echo the resolved config before any training starts."""
    dataset = build_dataset(config.dataset)
    k = step_size_for(config, dataset.num_classes)
    write_resolved_config(config.output_dir, config.to_dict())
    logger.info("resolved config written to %s step_size=%d", Path(config.output_dir) / RESOLVED_CONFIG_NAME, k)
    return dataset, k


def expand_jobs(config: ExperimentConfig, sweep_holdout: bool = False) -> List[Job]:
    holdouts: Sequence[Optional[int]] = (None,)
    if sweep_holdout and config.holdout_per_class_values:
        holdouts = config.holdout_per_class_values
    return [
        Job(strategy, seed, holdout)
        for holdout in holdouts
        for strategy in config.strategies
        for seed in config.seeds
    ]


def run_job(config: ExperimentConfig, dataset: Dataset, job: Job, step_size: int) -> RunRecord:
    if job.holdout_per_class is not None:
        dataset = replace(dataset, name=f"{dataset.name}[holdout={job.holdout_per_class}]")
    split = build_split(dataset, config, job.seed, job.holdout_per_class)
    loop_cfg = config.loop_config(job.strategy, job.seed, step_size)
    logger.info(
        "run dataset=%s strategy=%s seed=%d sizes=%s step_size=%d",
        dataset.name,
        job.strategy,
        job.seed,
        split.sizes(),
        loop_cfg.step_size,
    )
    record = run_active_learning(dataset, split, loop_cfg)
    write_run_record(config.output_dir, record)
    return record


def cmd_run(config: ExperimentConfig) -> List[RunRecord]:
    """Run every (strategy, seed) pair sequentially and refresh the results CSV."""
    dataset, step_size = prepare_runs(config)
    records = [run_job(config, dataset, job, step_size) for job in expand_jobs(config)]
    rebuild_results_csv(config.output_dir)
    return records


def cmd_sweep(config: ExperimentConfig, workers: int = 1) -> List[RunRecord]:
    """Fan (holdout variant, strategy, seed) runs out over a bounded thread pool.

    Each run writes its own record; the results CSV is rebuilt once all finish.
    """
    if workers < 1:
        raise ConfigValidationError("workers", "must be >= 1")
    dataset, step_size = prepare_runs(config)
    jobs = expand_jobs(config, sweep_holdout=True)
    logger.info("sweep jobs=%d workers=%d", len(jobs), workers)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        records = list(executor.map(lambda job: run_job(config, dataset, job, step_size), jobs))
    rebuild_results_csv(config.output_dir)
    return records


def summarize_results(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-(dataset, strategy, step) mean and sample std of accuracy and mistake rate."""
    rows = []
    for (dataset, strategy), group in frame.groupby(["dataset", "strategy"], sort=True):
        series: Dict[int, List[Tuple[float, Optional[float]]]] = {}
        for seed, runs in group.groupby("seed", sort=True):
            ordered = runs.sort_values("step")
            series[int(seed)] = [
                (float(acc), None if pd.isna(rate) else float(rate))
                for acc, rate in zip(ordered["test_accuracy"], ordered["mistake_rate"])
            ]
        for agg in aggregate_series(series):
            rows.append(
                {
                    "dataset": dataset,
                    "strategy": strategy,
                    "step": agg.step,
                    "runs": agg.runs,
                    "test_accuracy_mean": agg.test_accuracy_mean,
                    "test_accuracy_std": agg.test_accuracy_std,
                    "mistake_rate_mean": agg.mistake_rate_mean,
                    "mistake_rate_std": agg.mistake_rate_std,
                    "single_run": agg.single_run,
                }
            )
    return pd.DataFrame(rows)


def mistake_table(summary: pd.DataFrame) -> pd.DataFrame:
    """Mistake-rate table: one row per (dataset, strategy), one mean/std column pair per shown step."""
    rows = []
    for (dataset, strategy), group in summary.groupby(["dataset", "strategy"], sort=True):
        last = int(group["step"].max())
        shown = MISTAKE_TABLE_STEPS if last >= MISTAKE_TABLE_STEPS[-1] else tuple(range(1, last + 1))
        row: Dict[str, object] = {"dataset": dataset, "strategy": strategy}
        by_step = group.set_index("step")
        for step in shown:
            present = step in by_step.index
            row[f"step_{step}_mean"] = by_step.at[step, "mistake_rate_mean"] if present else None
            row[f"step_{step}_std"] = by_step.at[step, "mistake_rate_std"] if present else None
        rows.append(row)
    return pd.DataFrame(rows)


def cmd_report(results_dir: Path) -> str:
    """Write summary CSVs and an aligned text report for a results directory.

    Raises:
        ReportError: If the directory holds no results.
    """
    results_dir = Path(results_dir)
    csv_path = results_dir / RESULTS_CSV_NAME
    if not csv_path.is_file():
        if not any((results_dir / RUNS_DIR_NAME).glob("*.json")):
            raise ReportError(f"no results found in {results_dir}")
        rebuild_results_csv(results_dir)
    frame = load_results_frame(csv_path)
    if frame.empty:
        raise ReportError(f"{csv_path} holds no rows")

    summary = summarize_results(frame)
    mistakes = mistake_table(summary)
    csv_options = {"index": False, "float_format": CSV_FLOAT_FORMAT, "na_rep": "", "lineterminator": "\n"}
    atomic_write_text(results_dir / SUMMARY_CSV_NAME, summary.to_csv(**csv_options))
    atomic_write_text(results_dir / MISTAKE_TABLE_CSV_NAME, mistakes.to_csv(**csv_options))

    accuracy = [
        _mean_std_text(mean, std, single)
        for mean, std, single in zip(summary["test_accuracy_mean"], summary["test_accuracy_std"], summary["single_run"])
    ]
    accuracy_view = summary.assign(accuracy=accuracy)[["dataset", "strategy", "step", "runs", "accuracy"]]
    sections = [
        "Test accuracy per step (mean +- std)",
        accuracy_view.to_string(index=False),
        "",
        "Share of wrongly predicted samples among selections (mean +- std)",
        mistakes.to_string(index=False, float_format=lambda value: f"{value:.4f}", na_rep="-"),
    ]
    if summary["single_run"].any():
        sections += ["", "* single run: std reported as 0"]
    text = "\n".join(sections) + "\n"
    atomic_write_text(results_dir / REPORT_TEXT_NAME, text)
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="activelearn", description="Pool-based active-learning benchmarks")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run every configured (strategy, seed) pair")
    _add_config_source(run)
    run.add_argument("--seed", type=int, help="Run a single seed instead of the configured list")
    run.add_argument("--strategy", help="Run a single strategy instead of the configured list")
    run.add_argument("--steps", type=int, help="Override the number of annotation steps")
    run.add_argument("--output-dir", help="Override the output directory")

    sweep = sub.add_parser("sweep", help="Run all (holdout variant, strategy, seed) jobs in parallel")
    _add_config_source(sweep)
    sweep.add_argument("--workers", type=int, default=1, help="Concurrent runs (default 1)")
    sweep.add_argument("--output-dir", help="Override the output directory")

    report = sub.add_parser("report", help="Summarise a results directory")
    report.add_argument("--dir", default=None, help="Results directory (default from ACTIVELEARN_OUTPUT_DIR)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.command == "report":
            print(cmd_report(Path(args.dir or default_output_dir())), end="")
            return EXIT_OK
        overrides = {"output_dir": args.output_dir}
        if args.command == "run":
            overrides.update(seed=args.seed, strategy=args.strategy, steps=args.steps)
        config = parse_config(path=args.config, preset=args.preset, overrides=overrides)
        if args.command == "run":
            records = cmd_run(config)
        else:
            records = cmd_sweep(config, workers=args.workers)
        logger.info("finished runs=%d output_dir=%s", len(records), config.output_dir)
        return EXIT_OK
    except (ConfigValidationError, DatasetError, StrategyError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        logger.debug("run failed", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _add_config_source(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    source.add_argument("--preset", help="Named preset from config/experiment-settings.yaml")


def _mean_std_text(mean: float, std: float, single: bool) -> str:
    return f"{mean:.4f} +- {std:.4f}{' *' if single else ''}"
