"""Training loop, decoupled-weight-decay Adam, experiment drivers.

One patient-level stratified split (0.70/0.10/0.20) is drawn from
``split_seed`` and reused across seeds; per-run seeds only vary
initialization, shuffling, and dropout. Early stopping tracks validation
AUPRC and restores the best checkpoint. Evaluation always uses hard routing.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from .config import ExperimentConfig
from .model import (ModelParams, Normalizer, PreparedDataset, bce_loss,
                    forward, init_model, predict_probs, prepare)

logger = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.70, 0.10, 0.20)

ABLATION_VARIANTS = ("full", "no_reliability_gate", "no_dt_embedding",
                     "no_stats_augment", "no_token_router", "no_weaving")


class AdamW:
    """Adam with decoupled weight decay on a dict of parameter tensors."""

    def __init__(self, tensors: dict, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = tensors
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.t = 0

    def clip_gradients(self, max_norm: float) -> float:
        """Scale all gradients so their global L2 norm is at most max_norm."""
        total = 0.0
        for t in self.tensors.values():
            if t.grad is not None:
                total += float((t.grad**2).sum())
        norm = float(np.sqrt(total))
        if norm > max_norm and norm > 0:
            scale = max_norm / norm
            for t in self.tensors.values():
                if t.grad is not None:
                    t.grad *= scale
        return norm

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, t in self.tensors.items():
            g = t.grad if t.grad is not None else 0.0
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
            t.data -= self.lr * (update + self.weight_decay * t.data)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def stratified_split(labels, split_seed: int):
    """Patient-level 0.70/0.10/0.20 index split, stratified by label."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence(split_seed))
    train, val, test = [], [], []
    for lab in (0, 1):
        idx = np.flatnonzero(labels == lab)
        rng.shuffle(idx)
        n = idx.size
        n_train = int(round(SPLIT_FRACTIONS[0] * n))
        n_val = int(round(SPLIT_FRACTIONS[1] * n))
        train.extend(idx[:n_train])
        val.extend(idx[n_train:n_train + n_val])
        test.extend(idx[n_train + n_val:])
    return (np.sort(np.array(train, dtype=np.intp)),
            np.sort(np.array(val, dtype=np.intp)),
            np.sort(np.array(test, dtype=np.intp)))


@dataclass
class DataSplits:
    train: PreparedDataset
    val: PreparedDataset
    test: PreparedDataset
    normalizer: Normalizer


def make_splits(windows, cfg: ExperimentConfig) -> DataSplits:
    labels = [w.label for w in windows]
    tr, va, te = stratified_split(labels, cfg.split_seed)
    if len(tr) == 0 or len(va) == 0 or len(te) == 0:
        raise ValueError("split produced an empty subset; dataset too small")
    train_windows = [windows[i] for i in tr]
    normalizer = Normalizer.fit(train_windows)
    return DataSplits(
        train=prepare(train_windows, normalizer),
        val=prepare([windows[i] for i in va], normalizer),
        test=prepare([windows[i] for i in te], normalizer),
        normalizer=normalizer,
    )


@dataclass
class TrainResult:
    params: ModelParams
    normalizer: Normalizer
    config: ExperimentConfig
    log: list                 # one dict per epoch
    best_epoch: int
    best_val_auprc: float
    diverged: bool = False


def evaluate(params: ModelParams, dataset: PreparedDataset,
             cfg: ExperimentConfig) -> mx.MetricsReport:
    """Hard-routing metrics on a prepared dataset."""
    probs = predict_probs(dataset, params, cfg)
    return mx.compute_all(dataset.labels, probs)


def train(splits: DataSplits, cfg: ExperimentConfig, seed=None) -> TrainResult:
    """Train one model; deterministic given (config, seed)."""
    cfg = replace(cfg, seed=cfg.seed if seed is None else int(seed))
    cfg.validate()
    if splits.val.labels.min() == splits.val.labels.max():
        raise ValueError("validation split is single-class")
    params = init_model(cfg, splits.train.n_vars, cfg.seed)
    opt = AdamW(params.tensors(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    drop_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,)))

    n_train = len(splits.train)
    best_state = params.copy_state()
    best_val = -np.inf
    best_epoch = 0
    log = []
    diverged = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n_train)
        epoch_loss = 0.0
        for lo in range(0, n_train, cfg.batch_size):
            batch_idx = order[lo:lo + cfg.batch_size]
            batch = splits.train.batch(batch_idx)
            res = forward(batch, params, cfg, training=True, rng=drop_rng)
            loss = bce_loss(res.logits, batch.labels)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                logger.error("diverged at epoch %d (loss=%r); restoring best "
                             "checkpoint from epoch %d", epoch, loss_val, best_epoch)
                diverged = True
                break
            ad.backward(loss)
            opt.clip_gradients(cfg.grad_clip)
            opt.step()
            opt.zero_grad()
            epoch_loss += loss_val * batch_idx.size
        if diverged:
            break
        epoch_loss /= n_train
        val_report = evaluate(params, splits.val, cfg)
        record = {"epoch": epoch, "train_loss": epoch_loss,
                  "val_auroc": val_report.auroc, "val_auprc": val_report.auprc}
        log.append(record)
        logger.info("epoch=%d train_loss=%.5f val_auroc=%.4f val_auprc=%.4f",
                    epoch, epoch_loss, val_report.auroc, val_report.auprc)
        if val_report.auprc > best_val:
            best_val = val_report.auprc
            best_epoch = epoch
            best_state = params.copy_state()
        elif epoch - best_epoch >= cfg.patience:
            logger.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
            break
    params.load_state(best_state)
    return TrainResult(params=params, normalizer=splits.normalizer, config=cfg,
                       log=log, best_epoch=best_epoch,
                       best_val_auprc=float(best_val), diverged=diverged)


def train_and_test(splits: DataSplits, cfg: ExperimentConfig, seed) -> tuple:
    result = train(splits, cfg, seed=seed)
    report = evaluate(result.params, splits.test, cfg)
    return result, report


def run_seeds(splits: DataSplits, cfg: ExperimentConfig, seeds=None):
    """Per-seed test reports for one configuration."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("empty seed list")
    reports = {}
    for s in seeds:
        _, rep = train_and_test(splits, cfg, seed=s)
        reports[s] = rep
    return reports


def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Ablation variant as a config copy; the base must have all flags off."""
    flags = cfg.ablation_flags()
    if any(flags.values()) or cfg.weaving != "chronological":
        raise ValueError("ablation base config must have all variant flags off")
    if variant == "full":
        return replace(cfg)
    if variant in flags:
        return replace(cfg, **{variant: True})
    if variant == "no_weaving":
        return replace(cfg, weaving="none")
    if variant == "random_weaving":
        return replace(cfg, weaving="random")
    raise ValueError(f"unknown ablation variant {variant!r}")


def run_ablation(splits: DataSplits, cfg: ExperimentConfig, variants=None,
                 seeds=None):
    """Seed-averaged metrics per variant; returns list of result rows."""
    variants = list(ABLATION_VARIANTS if variants is None else variants)
    if len(set(variants)) != len(variants):
        raise ValueError("duplicate ablation variants")
    rows = []
    for variant in variants:
        vcfg = variant_config(cfg, variant)
        reports = run_seeds(splits, vcfg, seeds)
        rows.append((variant, reports))
    return rows


def run_sweep(splits: DataSplits, cfg: ExperimentConfig, axis: str, values,
              seeds=None):
    """Sweep one axis ('scales' or 'budget'); 'off' on the budget axis means
    bypassing the router entirely."""
    values = list(values)
    if not values:
        raise ValueError("empty sweep value list")
    if axis not in ("scales", "budget"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    rows = []
    for value in values:
        if axis == "scales":
            vcfg = replace(cfg, scales=tuple(float(v) for v in value))
            label = ",".join(str(int(s)) if float(s).is_integer() else str(s)
                             for s in vcfg.scales)
        else:
            if isinstance(value, str) and value.lower() == "off":
                vcfg = replace(cfg, no_token_router=True)
                label = "off"
            else:
                vcfg = replace(cfg, budget=int(value))
                label = str(int(value))
        vcfg.validate()
        reports = run_seeds(splits, vcfg, seeds)
        rows.append((label, reports))
    return rows


# --- result serialization -------------------------------------------------------

METRIC_FIELDS = ("auroc", "auprc", "brier", "ece")


def results_csv_rows(rows):
    """Flatten (label, {seed: report}) pairs into per-seed plus summary rows."""
    out = [["variant", "seed"] + list(METRIC_FIELDS)]
    for label, reports in rows:
        for s, rep in reports.items():
            d = rep.as_dict()
            out.append([label, s] + [repr(float(d[m])) for m in METRIC_FIELDS])
        for stat_name, stat in (("mean", 0), ("std", 1)):
            vals = [mx.summarize([rep.as_dict()[m] for rep in reports.values()])[stat]
                    for m in METRIC_FIELDS]
            out.append([label, stat_name] + [repr(float(v)) for v in vals])
    return out


def write_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)


def write_log(path, log) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in log:
            f.write(json.dumps(record, sort_keys=True) + "\n")
