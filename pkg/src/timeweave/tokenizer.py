"""Flatten grid windows into time-variable token sequences and embed them.

Each grid cell (timestep, variable) becomes one token; the flattening is
row-major over (timestep, variable), so token ``i`` maps to
``(i // V, i % V)``. Temporal inputs are normalized before embedding:
window position to [-1, 1] linearly, staleness to [0, 1] on a log scale and
then to [-1, 1].

Continuous scalars are embedded by a one-hidden-layer lift
``CVE(s) = tanh(s * a + b) @ W`` (scalar -> D); variable identity uses a
plain embedding table. A token's embedding is the sum of the four parts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .events import EventWindow


@dataclass
class TokenSequence:
    """Per-sample flattened token arrays (all length ``n_tokens``)."""

    n_tokens: int
    values: np.ndarray       # grid value per token (possibly normalized)
    mask: np.ndarray         # 1.0 observed
    gap_min: np.ndarray      # raw staleness, minutes
    time_min: np.ndarray     # grid timestamp, minutes
    var_idx: np.ndarray      # variable index, int
    t_max: float
    time_norm: np.ndarray | None = None    # [-1, 1]
    stale_norm: np.ndarray | None = None   # [0, 1]
    stale_signed: np.ndarray | None = None  # [-1, 1]


def flatten(window: EventWindow) -> TokenSequence:
    """Row-major (timestep, variable) flattening of a window."""
    L, V = window.values.shape
    return TokenSequence(
        n_tokens=L * V,
        values=window.values.reshape(-1).copy(),
        mask=window.mask.reshape(-1).copy(),
        gap_min=window.gap.reshape(-1).copy(),
        time_min=np.repeat(window.times, V),
        var_idx=np.tile(np.arange(V, dtype=np.intp), L),
        t_max=window.t_max,
    )


def normalize_time(time_min: np.ndarray, t_max: float) -> np.ndarray:
    """Map window time [0, t_max] linearly onto [-1, 1]."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    return np.clip(2.0 * np.asarray(time_min, dtype=np.float64) / t_max - 1.0,
                   -1.0, 1.0)


def normalize_gap(gap_min: np.ndarray, t_max: float):
    """Log-scale staleness to [0, 1], plus its [-1, 1] remap.

    Returns ``(stale_norm, stale_signed)`` with
    ``stale_norm = clip(log(1 + gap) / log(1 + t_max), 0, 1)`` and
    ``stale_signed = 2 * stale_norm - 1``.
    """
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    gap = np.asarray(gap_min, dtype=np.float64)
    if (gap < 0).any():
        raise ValueError("negative gaps: corrupt input")
    stale = np.clip(np.log1p(gap) / np.log1p(t_max), 0.0, 1.0)
    return stale, 2.0 * stale - 1.0


def tokenize(window: EventWindow) -> TokenSequence:
    """Flatten plus normalized temporal fields."""
    seq = flatten(window)
    seq.time_norm = normalize_time(seq.time_min, seq.t_max)
    seq.stale_norm, seq.stale_signed = normalize_gap(seq.gap_min, seq.t_max)
    return seq


# --- embeddings ---------------------------------------------------------------

@dataclass
class CveParams:
    """Scalar -> D continuous-value embedding: ``tanh(s * a + b) @ w``."""

    a: Tensor
    b: Tensor
    w: Tensor

    def tensors(self):
        return {"a": self.a, "b": self.b, "w": self.w}


@dataclass
class EmbeddingParams:
    cve_time: CveParams
    cve_value: CveParams
    cve_stale: CveParams
    var_table: Tensor

    def tensors(self):
        out = {}
        for prefix, blk in (("cve_time", self.cve_time),
                            ("cve_value", self.cve_value),
                            ("cve_stale", self.cve_stale)):
            out.update({f"{prefix}.{k}": t for k, t in blk.tensors().items()})
        out["var_table"] = self.var_table
        return out


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_cve(rng: np.random.Generator, dim: int) -> CveParams:
    return CveParams(
        a=ad.parameter(xavier_uniform(rng, (dim,), 1, dim)),
        b=ad.parameter(np.zeros(dim)),
        w=ad.parameter(xavier_uniform(rng, (dim, dim), dim, dim)),
    )


def init_embedding_params(rng: np.random.Generator, n_vars: int, dim: int) -> EmbeddingParams:
    return EmbeddingParams(
        cve_time=init_cve(rng, dim),
        cve_value=init_cve(rng, dim),
        cve_stale=init_cve(rng, dim),
        var_table=ad.parameter(xavier_uniform(rng, (n_vars, dim), n_vars, dim)),
    )


def cve_apply(params: CveParams, scalars) -> Tensor:
    """Embed an array of scalars; output shape ``scalars.shape + (D,)``."""
    s = scalars if isinstance(scalars, Tensor) else Tensor(scalars)
    lifted = ad.tanh(ad.add(ad.mul(ad.reshape(s, s.shape + (1,)), params.a), params.b))
    return ad.matmul(lifted, params.w)


def embed_fields(time_norm, values, var_idx, stale_signed,
                 params: EmbeddingParams, include_stale: bool = True) -> Tensor:
    """Sum of the four token-embedding parts; broadcasts over leading axes.

    ``time_norm`` and ``var_idx`` may be shared (shape (N,)) while ``values``
    and ``stale_signed`` carry a batch axis (B, N).
    """
    z = ad.add(cve_apply(params.cve_time, time_norm),
               cve_apply(params.cve_value, values))
    z = ad.add(z, ad.take(params.var_table, np.asarray(var_idx, dtype=np.intp), axis=0))
    if include_stale:
        z = ad.add(z, cve_apply(params.cve_stale, stale_signed))
    return z


def embed(seq: TokenSequence, params: EmbeddingParams,
          include_stale: bool = True) -> Tensor:
    """Token embedding matrix (n_tokens, D) for one sequence."""
    if seq.time_norm is None or seq.stale_signed is None:
        raise ValueError("sequence is missing normalized fields; call tokenize()")
    dim = params.var_table.shape[1]
    if params.cve_time.a.shape != (dim,):
        raise ValueError("embedding parameter dimension mismatch")
    return embed_fields(seq.time_norm, seq.values, seq.var_idx,
                        seq.stale_signed, params, include_stale=include_stale)
