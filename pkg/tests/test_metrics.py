import numpy as np
import pytest

from timeweave import metrics as mx


# --- brute-force oracles (independent of the implementations) -----------------

def auroc_pairwise_oracle(y, s):
    pos = s[y == 1]
    neg = s[y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def auprc_threshold_oracle(y, s):
    total = 0.0
    prev_recall = 0.0
    n_pos = y.sum()
    for t in sorted(set(s), reverse=True):
        preds = s >= t
        tp = float((y[preds] == 1).sum())
        precision = tp / preds.sum()
        recall = tp / n_pos
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


def ece_loop_oracle(y, p, n_bins=10):
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        sel = (p >= lo) & (p < hi) if b < n_bins - 1 else (p >= lo) & (p <= hi)
        if sel.sum():
            total += sel.sum() / len(y) * abs(p[sel].mean() - y[sel].mean())
    return total


def test_perfect_predictor():
    y = np.array([0, 1, 0, 1, 1], dtype=float)
    assert mx.auroc(y, y) == 1.0
    assert mx.auprc(y, y) == 1.0
    assert mx.brier(y, y) == 0.0
    assert mx.ece(y, y) == 0.0


def test_constant_half_on_balanced_labels():
    y = np.array([0, 1] * 10, dtype=float)
    p = np.full(20, 0.5)
    assert mx.brier(y, p) == 0.25
    assert mx.ece(y, p) == 0.0  # single occupied bin with accuracy 0.5


def test_random_sets_match_oracles():
    rng = np.random.default_rng(404)
    for trial in range(60):
        n = int(rng.integers(5, 51))
        y = (rng.random(n) < 0.4).astype(float)
        if y.min() == y.max():
            continue
        s = np.round(rng.random(n), 2)  # coarse grid induces ties
        assert abs(mx.auroc(y, s) - auroc_pairwise_oracle(y, s)) < 1e-9
        assert abs(mx.auprc(y, s) - auprc_threshold_oracle(y, s)) < 1e-9
        assert abs(mx.brier(y, s) - np.mean((s - y) ** 2)) < 1e-12
        assert abs(mx.ece(y, s) - ece_loop_oracle(y, s)) < 1e-9


def test_auroc_equals_mann_whitney_normalization():
    rng = np.random.default_rng(7)
    for trial in range(25):
        n = int(rng.integers(10, 201))
        y = (rng.random(n) < 0.3).astype(float)
        if y.min() == y.max():
            continue
        s = rng.normal(size=n)
        n_pos, n_neg = int(y.sum()), int(n - y.sum())
        # U statistic from ranks, computed independently
        order = np.argsort(s)
        ranks = np.empty(n)
        ranks[order] = np.arange(1, n + 1)
        u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
        assert mx.auroc(y, s) == pytest.approx(u / (n_pos * n_neg), abs=1e-12)


def test_single_class_errors():
    with pytest.raises(ValueError):
        mx.auroc(np.ones(5), np.random.rand(5))
    with pytest.raises(ValueError):
        mx.auprc(np.zeros(5), np.random.rand(5))


def test_probability_one_lands_in_top_bin():
    y = np.array([1.0, 1.0])
    p = np.array([1.0, 0.95])
    assert mx.ece(y, p) == pytest.approx(abs(0.975 - 1.0))


def test_compute_all_report():
    y = np.array([0, 1, 1, 0], dtype=float)
    p = np.array([0.2, 0.9, 0.7, 0.4])
    rep = mx.compute_all(y, p)
    assert rep.auroc == 1.0 and rep.n_samples == 4
    assert rep.prevalence == 0.5


def test_summarize_population_std():
    mean, std = mx.summarize([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert std == pytest.approx(np.sqrt(2.0 / 3.0))
