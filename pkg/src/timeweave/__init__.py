"""Reliability-weighted multi-scale sequence encoder for irregular event streams.

The pipeline: flatten an (L, V) grid window into time-variable tokens, embed
value/time/staleness/variable signals, weight tokens by learned reliability
decay, pool them into bucket summaries at several temporal scales, weave the
summaries chronologically, route them under a token budget, and encode with a
selective state-space stack for binary prediction.
"""

from .config import ExperimentConfig
from .events import CohortSpec, EventRecord, EventWindow, load_events, synthesize_cohort
from .metrics import MetricsReport, auprc, auroc, brier, compute_all, ece
from .model import (ModelParams, Normalizer, forward, init_model,
                    load_checkpoint, prepare, save_checkpoint)
from .training import DataSplits, evaluate, make_splits, run_ablation, run_sweep, train

__version__ = "0.1.0"

__all__ = [
    "CohortSpec", "DataSplits", "EventRecord", "EventWindow", "ExperimentConfig",
    "MetricsReport", "ModelParams", "Normalizer", "auprc", "auroc", "brier",
    "compute_all", "ece", "evaluate", "forward", "init_model", "load_checkpoint",
    "load_events", "make_splits", "prepare", "run_ablation", "run_sweep",
    "save_checkpoint", "synthesize_cohort", "train",
]
