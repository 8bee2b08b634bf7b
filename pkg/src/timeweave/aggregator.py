"""Multi-scale bucket summaries and their chronological interleaving.

Tokens are assigned to half-open intervals ``[k*s, (k+1)*s)`` per temporal
scale ``s`` (minutes), pooled with reliability weights, augmented with a
dispersion signal and bucket statistics, tagged with center-time and scale
embeddings, concatenated across scales, and finally reordered by bucket
center time so that summaries of nearby periods sit next to each other.

Position is restored from the normalized time as ``u = (tau + 1)/2 * t_max``
and rounded to 1e-6 minutes before the floor division: the restore loses a
few ulps to cancellation, which would otherwise push grid points sitting
exactly on a bucket boundary into the previous bucket.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import CveParams, cve_apply, init_cve, normalize_time, xavier_uniform

U_DECIMALS = 6  # minute-position rounding before floor (see module docstring)


def validate_scales(scales) -> tuple:
    s = tuple(float(x) for x in scales)
    if not s:
        raise ValueError("need at least one temporal scale")
    if any(x <= 0 for x in s):
        raise ValueError("scales must be positive")
    if len(set(s)) != len(s):
        raise ValueError("duplicate scales")
    if list(s) != sorted(s):
        raise ValueError("scales must be sorted ascending")
    return s


def restore_minutes(time_norm, t_max: float) -> np.ndarray:
    """Invert the [-1, 1] time normalization back to minutes."""
    u = (np.asarray(time_norm, dtype=np.float64) + 1.0) * 0.5 * t_max
    return np.round(u, U_DECIMALS)


def bucket_ids(time_norm, scale: float, t_max: float) -> np.ndarray:
    """Half-open bucket index per token; the right window edge closes the
    last bucket so u == t_max stays in range."""
    u = restore_minutes(time_norm, t_max)
    ids = np.floor(u / scale).astype(np.intp)
    last = int(np.ceil(t_max / scale)) - 1
    return np.minimum(ids, last)


def bucket_center(k, scale: float):
    return (np.asarray(k, dtype=np.float64) + 0.5) * scale


def bucketize(time_norm, scale: float, t_max: float):
    """Non-empty buckets as ordered ``(k, member_index_array)`` pairs."""
    ids = bucket_ids(time_norm, scale, t_max)
    out = []
    for k in np.unique(ids):
        out.append((int(k), np.flatnonzero(ids == k)))
    return out


# --- per-bucket operations (reference surfaces) --------------------------------

def pool(member_idx, z: Tensor, rel_w: Tensor, eps: float = 1e-8):
    """Reliability-weighted mean and raw second moment of one bucket.

    Returns ``(mu, second_moment)``, both (D,), sharing the same
    eps-regularized denominator.
    """
    zb = ad.take(z, member_idx, axis=0)
    rb = ad.reshape(ad.take(rel_w, member_idx, axis=0), (len(member_idx), 1))
    denom = ad.add(ad.sum_(rb), eps)
    mu = ad.div(ad.sum_(ad.mul(rb, zb), axis=0), denom)
    m2 = ad.div(ad.sum_(ad.mul(rb, ad.mul(zb, zb)), axis=0), denom)
    return mu, m2


def dispersion(member_idx, z: Tensor, rel_w: Tensor, mu: Tensor,
               eps: float = 1e-8) -> Tensor:
    """Nonnegative variance-like signal: clip+(E_w[z*z] - mu*mu)."""
    _, m2 = pool(member_idx, z, rel_w, eps=eps)
    return ad.clip(ad.sub(m2, ad.mul(mu, mu)), 0.0, None)


def bucket_stats(member_idx, mask, rel_w: Tensor, stale_norm,
                 eps: float = 1e-8) -> Tensor:
    """4-vector [log(1+n_obs), coverage, log(1+eff_count), mean staleness].

    The staleness term uses the normalized [0, 1] staleness, weighted by
    reliability with the shared eps denominator.
    """
    m = np.asarray(mask, dtype=np.float64)[member_idx]
    n_obs = float(m.sum())
    n_all = len(member_idx)
    if n_all < 1:
        raise ValueError("empty bucket")
    rb = ad.take(rel_w, member_idx, axis=0)
    eff = ad.sum_(rb)
    stale_b = ad.div(ad.sum_(ad.mul(rb, np.asarray(stale_norm)[member_idx])),
                     ad.add(eff, eps))
    return ad.concat([
        ad.Tensor(np.array([np.log1p(n_obs)])),
        ad.Tensor(np.array([n_obs / n_all])),
        ad.reshape(ad.log1p(eff), (1,)),
        ad.reshape(stale_b, (1,)),
    ])


# --- parameters -----------------------------------------------------------------

@dataclass
class ScaleTransform:
    """Dispersion transform for one scale: layer norm + learnable projection."""

    w: Tensor
    b: Tensor

    def apply(self, nu: Tensor) -> Tensor:
        return ad.add(ad.matmul(ad.layer_norm(nu), self.w), self.b)


@dataclass
class AggregatorParams:
    scale_transforms: list          # one ScaleTransform per scale
    stats_w1: Tensor                # 4 -> D
    stats_b1: Tensor
    stats_w2: Tensor                # D -> D
    stats_b2: Tensor
    cve_center: CveParams
    scale_table: Tensor             # (n_scales, D)

    def tensors(self):
        out = {}
        for i, tr in enumerate(self.scale_transforms):
            out[f"scale{i}.w"] = tr.w
            out[f"scale{i}.b"] = tr.b
        out.update(stats_w1=self.stats_w1, stats_b1=self.stats_b1,
                   stats_w2=self.stats_w2, stats_b2=self.stats_b2)
        out.update({f"cve_center.{k}": t for k, t in self.cve_center.tensors().items()})
        out["scale_table"] = self.scale_table
        return out

    def stats_mlp(self, g: Tensor, drop_rate: float = 0.0,
                  rng: np.random.Generator | None = None) -> Tensor:
        h = ad.tanh(ad.add(ad.matmul(g, self.stats_w1), self.stats_b1))
        if drop_rate > 0.0 and rng is not None:
            h = ad.dropout(h, drop_rate, rng)
        return ad.add(ad.matmul(h, self.stats_w2), self.stats_b2)


def init_aggregator_params(rng: np.random.Generator, n_scales: int,
                           dim: int) -> AggregatorParams:
    transforms = [ScaleTransform(w=ad.parameter(xavier_uniform(rng, (dim, dim), dim, dim)),
                                 b=ad.parameter(np.zeros(dim)))
                  for _ in range(n_scales)]
    return AggregatorParams(
        scale_transforms=transforms,
        stats_w1=ad.parameter(xavier_uniform(rng, (4, dim), 4, dim)),
        stats_b1=ad.parameter(np.zeros(dim)),
        stats_w2=ad.parameter(xavier_uniform(rng, (dim, dim), dim, dim)),
        stats_b2=ad.parameter(np.zeros(dim)),
        cve_center=init_cve(rng, dim),
        scale_table=ad.parameter(xavier_uniform(rng, (n_scales, dim), n_scales, dim)),
    )


# --- batched aggregation ----------------------------------------------------------

@dataclass
class ScaleLayout:
    """Static bucket structure for one scale over a shared grid."""

    scale: float
    starts: np.ndarray      # run starts into the token axis
    counts: np.ndarray      # run lengths
    ks: np.ndarray          # bucket index per run
    centers: np.ndarray     # minutes


def scale_layout(time_norm, scale: float, t_max: float) -> ScaleLayout:
    ids = bucket_ids(time_norm, scale, t_max)
    if (np.diff(ids) < 0).any():
        raise ValueError("token order must be nondecreasing in time")
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    counts = np.diff(np.r_[starts, ids.size])
    ks = ids[starts]
    return ScaleLayout(scale=scale, starts=starts, counts=counts, ks=ks,
                       centers=bucket_center(ks, scale))


@dataclass
class MultiScaleSequence:
    """Woven multi-scale summary tokens.

    ``tokens`` is (..., n_tok, D); ``valid`` is all ones (empty buckets are
    never emitted, the mask is kept for interface symmetry with routing);
    ``centers`` carries bucket center times; ``scale_idx``/``bucket_k`` give
    per-token provenance.
    """

    tokens: Tensor
    valid: np.ndarray
    centers: np.ndarray
    scale_idx: np.ndarray
    bucket_k: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.centers.size


def weave_order(centers, mode: str = "chronological",
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Permutation applied after scale concatenation.

    Chronological mode is a stable sort by center time; with the scale blocks
    concatenated in ascending scale order and buckets ordered within a block,
    ties resolve to (scale ascending, bucket index ascending).
    """
    n = len(centers)
    if mode == "chronological":
        return np.argsort(centers, kind="stable")
    if mode == "none":
        return np.arange(n)
    if mode == "random":
        if rng is None:
            raise ValueError("random weaving needs an rng")
        return rng.permutation(n)
    raise ValueError(f"unknown weaving mode {mode!r}")


def aggregate(z: Tensor, rel_w: Tensor, mask, stale_norm, time_norm,
              t_max: float, scales, params: AggregatorParams,
              eps: float = 1e-8, stats_augment: bool = True,
              weaving: str = "chronological",
              weave_rng: np.random.Generator | None = None,
              drop_rate: float = 0.0,
              drop_rng: np.random.Generator | None = None) -> MultiScaleSequence:
    """Bucket, pool, augment, concatenate, and weave in one pass.

    ``z`` is (..., N, D) with the token axis second-to-last; ``mask``,
    ``stale_norm`` broadcast against ``rel_w`` (..., N); ``time_norm`` is the
    shared (N,) grid. Batched inputs share the same bucket structure.
    """
    scales = validate_scales(scales)
    token_axis = z.ndim - 2
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), rel_w.shape)
    stale = np.broadcast_to(np.asarray(stale_norm, dtype=np.float64), rel_w.shape)

    per_scale = []
    centers_all, sidx_all, ks_all = [], [], []
    for si, s in enumerate(scales):
        lay = scale_layout(time_norm, s, t_max)
        rel_sum = ad.segment_sum(rel_w, lay.starts, lay.counts, axis=token_axis)
        denom = ad.add(rel_sum, eps)
        denom_col = ad.reshape(denom, denom.shape + (1,))
        weighted = ad.mul(ad.reshape(rel_w, rel_w.shape + (1,)), z)
        mu = ad.div(ad.segment_sum(weighted, lay.starts, lay.counts, axis=token_axis),
                    denom_col)
        if stats_augment:
            m2 = ad.div(ad.segment_sum(ad.mul(weighted, z), lay.starts, lay.counts,
                                       axis=token_axis), denom_col)
            nu = ad.clip(ad.sub(m2, ad.mul(mu, mu)), 0.0, None)
            mu = ad.add(mu, params.scale_transforms[si].apply(nu))

            n_obs = np.add.reduceat(m, lay.starts, axis=token_axis)
            cover = n_obs / lay.counts
            eff_log = ad.log1p(rel_sum)
            stale_b = ad.div(ad.segment_sum(ad.mul(rel_w, stale), lay.starts,
                                            lay.counts, axis=token_axis), denom)
            col = denom.shape + (1,)
            g = ad.concat([ad.Tensor(np.log1p(n_obs).reshape(col)),
                           ad.Tensor(cover.reshape(col)),
                           ad.reshape(eff_log, col),
                           ad.reshape(stale_b, col)], axis=-1)
            mu = ad.add(mu, params.stats_mlp(g, drop_rate, drop_rng))

        centers_norm = normalize_time(lay.centers, t_max)
        mu = ad.add(mu, cve_apply(params.cve_center, centers_norm))
        mu = ad.add(mu, ad.take(params.scale_table, np.full(lay.ks.size, si), axis=0))

        per_scale.append(mu)
        centers_all.append(lay.centers)
        sidx_all.append(np.full(lay.ks.size, si, dtype=np.intp))
        ks_all.append(lay.ks)

    tokens = ad.concat(per_scale, axis=token_axis)
    centers = np.concatenate(centers_all)
    sidx = np.concatenate(sidx_all)
    ks = np.concatenate(ks_all)

    order = weave_order(centers, mode=weaving, rng=weave_rng)
    tokens = ad.take(tokens, order, axis=token_axis)
    return MultiScaleSequence(tokens=tokens, valid=np.ones(centers.size),
                              centers=centers[order], scale_idx=sidx[order],
                              bucket_k=ks[order])


def max_tokens(t_max: float, scales) -> int:
    """Upper bound on woven sequence length."""
    return int(sum(np.ceil(t_max / s) for s in validate_scales(scales)))
