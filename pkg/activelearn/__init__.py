"""Pool-based active learning: wrong-prediction detection criteria, baselines and a benchmark harness."""
from .data import Dataset, ImbalanceSpec, Split, SplitSpec, make_imbalanced_split, make_split, oracle_annotate
from .loop import LoopConfig, RunRecord, StepRecord, aggregate_runs, run_active_learning
from .nn_core import MlpModel, ModelSnapshot
from .strategies import STRATEGY_IDS, StrategyParams, build_holdout_cache, score_ours, score_ours_app, select

__all__ = [
    "Dataset",
    "ImbalanceSpec",
    "LoopConfig",
    "MlpModel",
    "ModelSnapshot",
    "RunRecord",
    "STRATEGY_IDS",
    "Split",
    "SplitSpec",
    "StepRecord",
    "StrategyParams",
    "aggregate_runs",
    "build_holdout_cache",
    "make_imbalanced_split",
    "make_split",
    "oracle_annotate",
    "run_active_learning",
    "score_ours",
    "score_ours_app",
    "select",
]
