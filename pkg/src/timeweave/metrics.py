"""Binary classification metrics: AUROC, AUPRC, Brier score, ECE.

Conventions (documented because they matter for cross-checking):

* AUROC via the rank statistic with tie-averaged ranks (equivalent to the
  normalized Mann-Whitney U with ties counted half).
* AUPRC is step-wise (non-interpolated) average precision: thresholds sweep
  the distinct scores in descending order, and each recall increment is paid
  at the precision of that threshold.
* ECE uses 10 equal-width bins on the predicted positive probability;
  p = 1.0 falls in the top bin. Per bin the gap is |mean(p) - mean(y)|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_inputs(labels, probs):
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError("labels and scores must be 1-D and equal length")
    if y.size == 0:
        raise ValueError("empty input")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    return y, p


def _require_both_classes(y):
    if y.min() == y.max():
        raise ValueError("metric undefined on a single-class label set")


def tie_averaged_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    boundaries = np.flatnonzero(np.r_[True, sx[1:] != sx[:-1], True])
    for a, b in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[a:b]] = 0.5 * (a + 1 + b)
    return ranks


def auroc(labels, scores) -> float:
    y, s = _check_inputs(labels, scores)
    _require_both_classes(y)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = tie_averaged_ranks(s)
    u = ranks[y == 1.0].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(labels, scores) -> float:
    """Step-wise average precision over descending distinct score thresholds."""
    y, s = _check_inputs(labels, scores)
    _require_both_classes(y)
    order = np.argsort(-s, kind="stable")
    y_sorted = y[order]
    s_sorted = s[order]
    n_pos = y.sum()
    tp = np.cumsum(y_sorted)
    preds = np.arange(1, y.size + 1)
    # evaluate only at the last index of each tied score block
    block_end = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp_b = tp[block_end]
    precision = tp_b / preds[block_end]
    recall = tp_b / n_pos
    recall_prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - recall_prev) * precision))


def brier(labels, probs) -> float:
    y, p = _check_inputs(labels, probs)
    return float(np.mean((p - y) ** 2))


def ece(labels, probs, n_bins: int = 10) -> float:
    y, p = _check_inputs(labels, probs)
    if (p < 0).any() or (p > 1).any():
        raise ValueError("probabilities must be in [0, 1]")
    bins = np.minimum((p * n_bins).astype(int), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        sel = bins == b
        if sel.any():
            gap = abs(p[sel].mean() - y[sel].mean())
            total += sel.sum() / y.size * gap
    return float(total)


@dataclass
class MetricsReport:
    auroc: float
    auprc: float
    brier: float
    ece: float
    n_samples: int
    prevalence: float

    def as_dict(self):
        return {"auroc": self.auroc, "auprc": self.auprc,
                "brier": self.brier, "ece": self.ece,
                "n_samples": self.n_samples, "prevalence": self.prevalence}


def compute_all(labels, probs) -> MetricsReport:
    y, p = _check_inputs(labels, probs)
    return MetricsReport(
        auroc=auroc(y, p),
        auprc=auprc(y, p),
        brier=brier(y, p),
        ece=ece(y, p),
        n_samples=y.size,
        prevalence=float(y.mean()),
    )


def summarize(values) -> tuple[float, float]:
    """Seed-aggregate as (mean, population std)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())
