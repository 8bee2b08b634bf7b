"""Per-token reliability weights from missingness and elapsed time.

Each variable channel learns a positive decay rate
``lambda_c = softplus(w_c) + lambda_min``; a missing token's weight decays as
``exp(-lambda * gap)`` with the gap in raw minutes, while observed tokens
always carry weight 1. The exponent is floored at -50 as underflow hygiene
(exp(-50) ~ 2e-22, invisible at f64).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import TokenSequence

EXP_FLOOR = -50.0


@dataclass
class DecayParams:
    logits: Tensor        # (V,) raw decay logits, learnable
    lambda_min: float

    def tensors(self):
        return {"decay_logits": self.logits}


def init_decay_params(n_vars: int, init_logit: float, lambda_min: float) -> DecayParams:
    if lambda_min <= 0:
        raise ValueError("lambda_min must be positive")
    return DecayParams(logits=ad.parameter(np.full(n_vars, init_logit)),
                       lambda_min=lambda_min)


def decay_rates(params: DecayParams) -> Tensor:
    """Positive per-variable decay rates (V,)."""
    return ad.add(ad.softplus(params.logits), params.lambda_min)


def reliability_weights(var_idx, mask, gap_min, rates: Tensor) -> Tensor:
    """Token weights in (0, 1]: 1 where observed, exp(-lambda*gap) where missing.

    ``mask``/``gap_min`` may carry leading batch axes; ``var_idx`` is shared
    (N,). The gap enters in raw minutes.
    """
    gap = np.asarray(gap_min, dtype=np.float64)
    if (gap < 0).any():
        raise ValueError("negative gaps")
    m = np.asarray(mask, dtype=np.float64)
    lam_tok = ad.take(rates, np.asarray(var_idx, dtype=np.intp), axis=0)
    arg = ad.clip(ad.mul(ad.neg(lam_tok), gap), EXP_FLOOR, None)
    return ad.add(m, ad.mul(1.0 - m, ad.exp(arg)))


def reliability(seq: TokenSequence, rates: Tensor) -> Tensor:
    """Per-sample reliability vector (n_tokens,)."""
    return reliability_weights(seq.var_idx, seq.mask, seq.gap_min, rates)


def decay_report(params: DecayParams, variable_names, groups, windows):
    """Table-style decay summary rows.

    ``groups`` maps variable name -> group label (every variable must be
    covered; unknown names are rejected). Per-variable rows carry the decay
    rate, observed coverage, and mean observation gap in hours computed from
    ``windows``; group rows aggregate them.
    """
    names = list(variable_names)
    unknown = set(groups) - set(names)
    if unknown:
        raise ValueError(f"unknown variables in grouping: {sorted(unknown)}")
    missing = set(names) - set(groups)
    if missing:
        raise ValueError(f"variables without a group: {sorted(missing)}")

    with ad.no_grad():
        lam = decay_rates(params).data
    if lam.shape[0] != len(names):
        raise ValueError("decay params do not match variable count")

    coverage = np.mean([w.mask.mean(axis=0) for w in windows], axis=0)
    gap_sums = np.zeros(len(names))
    gap_counts = np.zeros(len(names))
    for w in windows:
        for v in range(len(names)):
            obs_times = w.times[w.mask[:, v] == 1.0]
            if obs_times.size >= 2:
                gap_sums[v] += np.diff(obs_times).sum()
                gap_counts[v] += obs_times.size - 1
    mean_gap_h = np.divide(gap_sums, gap_counts,
                           out=np.full(len(names), np.nan), where=gap_counts > 0) / 60.0

    rows = [["kind", "name", "group", "decay", "coverage", "mean_gap_h"]]
    for v, name in enumerate(names):
        rows.append(["variable", name, groups[name], repr(float(lam[v])),
                     repr(float(coverage[v])), repr(float(mean_gap_h[v]))])
    for grp in sorted(set(groups.values())):
        sel = [v for v, name in enumerate(names) if groups[name] == grp]
        grp_gaps = mean_gap_h[sel]
        grp_gap = float(np.nanmean(grp_gaps)) if np.isfinite(grp_gaps).any() else float("nan")
        rows.append(["group", grp, grp, repr(float(lam[sel].mean())),
                     repr(float(coverage[sel].mean())), repr(grp_gap)])
    return rows


def load_groups_csv(path) -> dict:
    """Read a ``variable,group`` CSV into a dict."""
    groups = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["variable", "group"]:
            raise ValueError(f"{path}: expected header variable,group")
        for row in reader:
            if row:
                groups[row[0]] = row[1]
    return groups
