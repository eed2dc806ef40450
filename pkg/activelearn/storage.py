"""File-backed persistence for run records (JSON) and the plot-ready results table (CSV)."""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
import tempfile
from typing import Any, List, Mapping, Union

import pandas as pd

from .loop import RunRecord
from .utils.constants import CSV_COLUMNS, CSV_FLOAT_FORMAT, RESOLVED_CONFIG_NAME, RESULTS_CSV_NAME, RUNS_DIR_NAME

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Write ``text`` to a sibling temp file, then rename it over ``path``.

    Readers never observe a partially written file.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return target


def write_resolved_config(output_dir: PathLike, document: Mapping[str, Any]) -> Path:
    """Echo the fully resolved experiment config as ``output_dir/config.json``."""
    path = Path(output_dir) / RESOLVED_CONFIG_NAME
    atomic_write_text(path, json.dumps(document, indent=2, sort_keys=True) + "\n")
    return path


def run_record_path(output_dir: PathLike, record: RunRecord) -> Path:
    safe_dataset = "".join(ch if ch.isalnum() or ch in "-_=" else "_" for ch in record.dataset)
    return Path(output_dir) / RUNS_DIR_NAME / f"{safe_dataset}__{record.strategy}__seed{record.seed}.json"


def write_run_record(output_dir: PathLike, record: RunRecord) -> Path:
    path = run_record_path(output_dir, record)
    atomic_write_text(path, json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    logger.debug("wrote run record %s", path)
    return path


def load_run_record(path: PathLike) -> RunRecord:
    with Path(path).open("r", encoding="utf-8") as fh:
        return RunRecord.from_dict(json.load(fh))


def load_run_records(output_dir: PathLike) -> List[RunRecord]:
    """All run records under ``output_dir/runs``, in file-name order."""
    runs_dir = Path(output_dir) / RUNS_DIR_NAME
    if not runs_dir.is_dir():
        return []
    return [load_run_record(path) for path in sorted(runs_dir.glob("*.json"))]


def records_frame(records: List[RunRecord]) -> pd.DataFrame:
    """Flatten run records into one row per (dataset, strategy, seed, step)."""
    rows = [
        {
            "dataset": record.dataset,
            "strategy": record.strategy,
            "seed": record.seed,
            "step": step.step,
            "train_size": step.train_size,
            "test_accuracy": step.test_accuracy,
            "holdout_loss": step.holdout_loss,
            "mistake_rate": step.mistake_selection_rate,
        }
        for record in records
        for step in record.steps
    ]
    frame = pd.DataFrame(rows, columns=list(CSV_COLUMNS))
    if frame.empty:
        return frame
    frame = frame.astype({"seed": "int64", "step": "int64", "train_size": "int64", "mistake_rate": "float64"})
    return frame.sort_values(["dataset", "strategy", "seed", "step"], kind="mergesort").reset_index(drop=True)


def rebuild_results_csv(output_dir: PathLike) -> Path:
    """Regenerate ``results.csv`` from every JSON run record in ``output_dir``.

    Floats use fixed six-decimal notation and an absent mistake rate is an
    empty field, so identical records always give an identical file.
    """
    frame = records_frame(load_run_records(output_dir))
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, na_rep="", lineterminator="\n")
    path = atomic_write_text(Path(output_dir) / RESULTS_CSV_NAME, text)
    logger.info("results table rows=%d path=%s", len(frame), path)
    return path


def load_results_frame(path: PathLike) -> pd.DataFrame:
    """Read a results CSV; ``path`` may be the file or the directory holding it."""
    target = Path(path)
    if target.is_dir():
        target = target / RESULTS_CSV_NAME
    frame = pd.read_csv(target, dtype={"dataset": str, "strategy": str})
    missing = [column for column in CSV_COLUMNS if column not in frame.columns]
    if missing:
        raise ValueError(f"{target} lacks columns: {', '.join(missing)}")
    return frame
