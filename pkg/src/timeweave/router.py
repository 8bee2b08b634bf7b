"""Budgeted token routing: soft gates in training, hard top-k at inference.

Scores are affine in the token embedding. Training multiplies each token by
the logistic gate of its score (shape-preserving, differentiable); inference
keeps the ``k`` highest-scoring tokens (ties: earlier center time, then lower
index) and restores chronological order before encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import xavier_uniform


@dataclass
class RouterParams:
    weight: Tensor   # (D,) as (D, 1) matmul operand
    bias: Tensor     # scalar
    budget: int

    def tensors(self):
        return {"router_w": self.weight, "router_b": self.bias}


def init_router_params(rng: np.random.Generator, dim: int, budget: int) -> RouterParams:
    if budget < 1:
        raise ValueError("budget must be >= 1")
    return RouterParams(weight=ad.parameter(xavier_uniform(rng, (dim, 1), dim, 1)),
                        bias=ad.parameter(np.zeros(1)),
                        budget=int(budget))


def score(tokens: Tensor, params: RouterParams) -> Tensor:
    """Importance scores, shape ``tokens.shape[:-1]``."""
    s = ad.matmul(tokens, params.weight)
    s = ad.add(s, params.bias)
    return ad.reshape(s, tokens.shape[:-1])


def route_train(tokens: Tensor, scores: Tensor) -> Tensor:
    """Gate every token by the logistic of its score (length preserved)."""
    gate = ad.sigmoid(scores)
    return ad.mul(ad.reshape(gate, gate.shape + (1,)), tokens)


def select_top_k(scores: np.ndarray, centers: np.ndarray, k: int):
    """Indices of the k best tokens plus their chronological order.

    Returns ``(selected, order)`` where ``selected`` are original indices of
    the kept tokens (selection order) and ``selected[order]`` is sorted by
    center time (stable on the original index for equal times).
    """
    n = scores.shape[0]
    if n == 0:
        raise ValueError("no tokens to route")
    idx = np.arange(n)
    by_rank = np.lexsort((idx, centers, -scores))
    selected = np.sort(by_rank[: min(k, n)])  # original-index order
    order = np.argsort(centers[selected], kind="stable")
    return selected, order


@dataclass
class RoutingResult:
    tokens: Tensor        # (..., n_kept, D), chronological
    valid: np.ndarray     # all ones, kept for interface symmetry
    centers: np.ndarray   # (...?, n_kept) center times, nondecreasing
    selected: np.ndarray  # original indices in chronological order


def route_infer(tokens: Tensor, centers: np.ndarray, scores: np.ndarray,
                k: int) -> RoutingResult:
    """Hard top-k selection and chronological reordering.

    Batched: ``tokens (B, N, D)`` with ``scores (B, N)`` selects per sample;
    the kept count ``min(k, N)`` is uniform so the result stays rectangular.
    Unbatched ``(N, D)`` inputs are handled as a batch of one.
    """
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = ad.reshape(tokens, (1,) + tokens.shape)
        scores = np.asarray(scores)[None, :]
    B, n, _ = tokens.shape
    if n == 0:
        raise ValueError("no tokens to route")
    kept = min(k, n)
    sel = np.empty((B, kept), dtype=np.intp)
    for b in range(B):
        selected, order = select_top_k(np.asarray(scores)[b], centers, k)
        sel[b] = selected[order]
    out = ad.take_per_row(tokens, sel)
    cents = centers[sel]
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
        sel = sel[0]
        cents = cents[0]
    return RoutingResult(tokens=out, valid=np.ones(kept), centers=cents,
                         selected=sel)
