"""Source-free domain adaptation of two-stream classifiers by small-loss self-training."""

from .adapt import (
    AdaptationError,
    AdaptConfig,
    AdaptMode,
    AdaptMonitor,
    EpochRecord,
    PseudoLabelStore,
    SelectionResult,
    generate_pseudo_labels,
    pretrain_source,
    run_cleanadapt,
    run_cleanadapt_ts,
    run_highloss_ablation,
    select_clean,
)
from .data import Dataset, DatasetError, ShiftSpec, TargetView, generate_shift_pair
from .evaluation import EvaluationError, cross_domain_retrieval, top1_accuracy
from .model import StreamMode, TwoStreamModel
from .numerics import RngState

__version__ = "0.1.0"

__all__ = [
    "AdaptationError",
    "AdaptConfig",
    "AdaptMode",
    "AdaptMonitor",
    "EpochRecord",
    "PseudoLabelStore",
    "SelectionResult",
    "generate_pseudo_labels",
    "pretrain_source",
    "run_cleanadapt",
    "run_cleanadapt_ts",
    "run_highloss_ablation",
    "select_clean",
    "Dataset",
    "DatasetError",
    "ShiftSpec",
    "TargetView",
    "generate_shift_pair",
    "EvaluationError",
    "cross_domain_retrieval",
    "top1_accuracy",
    "StreamMode",
    "TwoStreamModel",
    "RngState",
]
