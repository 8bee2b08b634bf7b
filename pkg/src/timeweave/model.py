"""Full pipeline assembly: parameters, data preparation, forward pass.

The forward pass runs batched: all windows of a dataset share one grid, so
token counts, bucket layouts, and the weave permutation are computed once and
reused. Training mode keeps every woven token under soft routing; evaluation
applies hard top-k routing per sample (uniform kept count keeps the batch
rectangular) and no dropout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import aggregator as agg
from . import autodiff as ad
from . import reliability as rel
from . import router as rt
from . import ssm
from . import tokenizer as tok
from .autodiff import Tensor
from .config import ExperimentConfig, config_dict

CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    embedding: tok.EmbeddingParams
    decay: rel.DecayParams
    aggregator: agg.AggregatorParams
    router: rt.RouterParams
    blocks: list
    stack_norm: ssm.StackNormParams
    head: ssm.HeadParams

    def tensors(self) -> dict:
        out = {}
        out.update({f"embed.{k}": t for k, t in self.embedding.tensors().items()})
        out.update({f"decay.{k}": t for k, t in self.decay.tensors().items()})
        out.update({f"agg.{k}": t for k, t in self.aggregator.tensors().items()})
        out.update({f"router.{k}": t for k, t in self.router.tensors().items()})
        for i, blk in enumerate(self.blocks):
            out.update({f"ssm{i}.{k}": t for k, t in blk.tensors().items()})
        out.update({f"stack.{k}": t for k, t in self.stack_norm.tensors().items()})
        out.update({f"head.{k}": t for k, t in self.head.tensors().items()})
        return out

    def groups(self) -> dict:
        """Parameter tensors keyed by functional group (for gradient checks)."""
        g = {"embeddings": {}, "decay": {}, "dispersion": {}, "stats_mlp": {},
             "center_scale": {}, "router": {}, "ssm": {}, "head": {}}
        for name, t in self.tensors().items():
            if name.startswith("embed."):
                g["embeddings"][name] = t
            elif name.startswith("decay."):
                g["decay"][name] = t
            elif name.startswith("agg.scale_table") or name.startswith("agg.cve_center"):
                g["center_scale"][name] = t
            elif name.startswith("agg.stats"):
                g["stats_mlp"][name] = t
            elif name.startswith("agg."):
                g["dispersion"][name] = t
            elif name.startswith("router."):
                g["router"][name] = t
            elif name.startswith(("ssm", "stack.")):
                g["ssm"][name] = t
            else:
                g["head"][name] = t
        return g

    def copy_state(self) -> dict:
        return {k: t.data.copy() for k, t in self.tensors().items()}

    def load_state(self, state: dict) -> None:
        for k, t in self.tensors().items():
            t.data[...] = state[k]


def init_model(cfg: ExperimentConfig, n_vars: int, seed: int) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    dim = cfg.d_model
    return ModelParams(
        embedding=tok.init_embedding_params(rng, n_vars, dim),
        decay=rel.init_decay_params(n_vars, cfg.init_decay_logit, cfg.lambda_min),
        aggregator=agg.init_aggregator_params(rng, len(cfg.scales), dim),
        router=rt.init_router_params(rng, dim, cfg.budget),
        blocks=[ssm.init_block(rng, dim, cfg.d_state, cfg.d_conv, cfg.expand)
                for _ in range(cfg.n_layers)],
        stack_norm=ssm.init_stack_norm(dim),
        head=ssm.init_head(rng, dim),
    )


# --- normalization ---------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-variable z-score statistics fitted on observed train cells only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, windows) -> "Normalizer":
        V = windows[0].n_vars
        sums = np.zeros(V)
        sq = np.zeros(V)
        counts = np.zeros(V)
        for w in windows:
            obs = w.mask == 1.0
            sums += np.where(obs, w.values, 0.0).sum(axis=0)
            sq += np.where(obs, w.values**2, 0.0).sum(axis=0)
            counts += obs.sum(axis=0)
        mean = np.divide(sums, counts, out=np.zeros(V), where=counts > 0)
        var = np.divide(sq, counts, out=np.zeros(V), where=counts > 0) - mean**2
        std = np.sqrt(np.maximum(var, 0.0))
        std[(std < 1e-8) | (counts < 2)] = 1.0
        return cls(mean=mean, std=std)

    def apply(self, window) -> np.ndarray:
        """Z-scored grid; cells before a variable's first observation become 0."""
        resolved = np.maximum.accumulate(window.mask, axis=0) > 0
        z = (window.values - self.mean) / self.std
        return np.where(resolved, z, 0.0)


# --- prepared data ----------------------------------------------------------------

@dataclass
class PreparedDataset:
    """Token-level arrays for a list of windows sharing one grid."""

    values: np.ndarray        # (n, N) normalized token values
    mask: np.ndarray          # (n, N)
    gap_min: np.ndarray       # (n, N)
    stale_norm: np.ndarray    # (n, N)
    stale_signed: np.ndarray  # (n, N)
    labels: np.ndarray        # (n,)
    time_norm: np.ndarray     # (N,) shared
    var_idx: np.ndarray       # (N,) shared
    t_max: float
    n_vars: int

    def __len__(self):
        return self.labels.size

    def batch(self, idx) -> "PreparedDataset":
        return PreparedDataset(
            values=self.values[idx], mask=self.mask[idx], gap_min=self.gap_min[idx],
            stale_norm=self.stale_norm[idx], stale_signed=self.stale_signed[idx],
            labels=self.labels[idx], time_norm=self.time_norm, var_idx=self.var_idx,
            t_max=self.t_max, n_vars=self.n_vars)


def prepare(windows, normalizer: Normalizer) -> PreparedDataset:
    if not windows:
        raise ValueError("empty window list")
    ref = windows[0]
    for w in windows:
        if w.n_vars != ref.n_vars or w.t_max != ref.t_max or \
                not np.array_equal(w.times, ref.times):
            raise ValueError("all windows in a dataset must share one grid")
    seqs = []
    for w in windows:
        s = tok.tokenize(w)
        s.values = normalizer.apply(w).reshape(-1)
        seqs.append(s)
    first = seqs[0]
    return PreparedDataset(
        values=np.stack([s.values for s in seqs]),
        mask=np.stack([s.mask for s in seqs]),
        gap_min=np.stack([s.gap_min for s in seqs]),
        stale_norm=np.stack([s.stale_norm for s in seqs]),
        stale_signed=np.stack([s.stale_signed for s in seqs]),
        labels=np.array([w.label for w in windows], dtype=np.float64),
        time_norm=first.time_norm, var_idx=first.var_idx,
        t_max=first.t_max, n_vars=ref.n_vars)


# --- forward pass -----------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor
    diagnostics: dict | None = None


def forward(batch: PreparedDataset, params: ModelParams, cfg: ExperimentConfig,
            training: bool, rng: np.random.Generator | None = None,
            collect: bool = False) -> ForwardResult:
    """Run the pipeline on a prepared batch.

    ``training`` selects soft routing plus dropout; evaluation uses hard
    top-k routing. ``collect`` attaches routing/aggregation diagnostics.
    """
    if training and cfg.dropout > 0.0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    z = tok.embed_fields(batch.time_norm, batch.values, batch.var_idx,
                         batch.stale_signed, params.embedding,
                         include_stale=not cfg.no_dt_embedding)
    if cfg.no_reliability_gate:
        rel_w = Tensor(np.ones_like(batch.mask))
    else:
        rel_w = rel.reliability_weights(batch.var_idx, batch.mask, batch.gap_min,
                                        rel.decay_rates(params.decay))
    weave_rng = None
    if cfg.weaving == "random":
        weave_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(3,)))
    msq = agg.aggregate(z, rel_w, batch.mask, batch.stale_norm, batch.time_norm,
                        batch.t_max, cfg.scales, params.aggregator,
                        eps=cfg.pool_eps, stats_augment=not cfg.no_stats_augment,
                        weaving=cfg.weaving, weave_rng=weave_rng,
                        drop_rate=cfg.dropout if training else 0.0, drop_rng=rng)

    diagnostics = None
    if cfg.no_token_router:
        routed = msq.tokens
        diag_sel = None
        scores = None
    else:
        scores = rt.score(msq.tokens, params.router)
        if training:
            routed = rt.route_train(msq.tokens, scores)
            diag_sel = None
        else:
            res = rt.route_infer(msq.tokens, msq.centers, scores.data, cfg.budget)
            routed = res.tokens
            diag_sel = res.selected

    h = ssm.encode(routed, params.blocks, stack_norm=params.stack_norm,
                   training=training, drop_rate=cfg.dropout, drop_rng=rng)
    logits, probs = ssm.pool_and_predict(h, params.head)
    if collect:
        diagnostics = {
            "rel_w": rel_w.data,
            "centers": msq.centers,
            "scale_idx": msq.scale_idx,
            "bucket_k": msq.bucket_k,
            "scores": None if scores is None else scores.data,
            "selected": diag_sel,
            "n_tokens": msq.n_tokens,
        }
    return ForwardResult(logits=logits, probs=probs, diagnostics=diagnostics)


def bce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from raw logits (softplus form)."""
    y = np.asarray(labels, dtype=np.float64)
    pos = ad.mul(ad.softplus(ad.neg(logits)), y)
    neg_t = ad.mul(ad.softplus(logits), 1.0 - y)
    return ad.mean_(ad.add(pos, neg_t))


def predict_probs(dataset: PreparedDataset, params: ModelParams,
                  cfg: ExperimentConfig, batch_size: int = 256) -> np.ndarray:
    """Hard-routing probabilities for a full dataset, graph-free."""
    out = np.empty(len(dataset))
    with ad.no_grad():
        for lo in range(0, len(dataset), batch_size):
            sl = np.arange(lo, min(lo + batch_size, len(dataset)))
            res = forward(dataset.batch(sl), params, cfg, training=False)
            out[sl] = res.probs.data
    return out


# --- checkpoints --------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, normalizer: Normalizer,
                    cfg: ExperimentConfig, variable_names=None) -> None:
    arrays = {f"param/{k}": t.data for k, t in params.tensors().items()}
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_dict(cfg),
        "n_vars": int(normalizer.mean.size),
        "variable_names": list(variable_names) if variable_names else None,
    }
    np.savez(path, __meta__=np.bytes_(json.dumps(meta).encode("utf-8")),
             norm_mean=normalizer.mean, norm_std=normalizer.std, **arrays)


def load_checkpoint(path):
    """Returns (params, normalizer, config, variable_names)."""
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode("utf-8"))
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        cfg_raw = meta["config"]
        for key in ("seeds", "scales"):
            cfg_raw[key] = tuple(cfg_raw[key])
        cfg = ExperimentConfig(**cfg_raw)
        cfg.validate()
        params = init_model(cfg, meta["n_vars"], cfg.seed)
        state = {k[len("param/"):]: blob[k] for k in blob.files
                 if k.startswith("param/")}
        params.load_state(state)
        normalizer = Normalizer(mean=blob["norm_mean"].copy(),
                                std=blob["norm_std"].copy())
    return params, normalizer, cfg, meta.get("variable_names")
