"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, sweep, decay-report,
dump-tokens, dump-buckets, dump-routing, cohort-stats. Every run owns its
output directory via a lockfile and writes an effective-config snapshot that
reproduces the run. Progress goes to stderr; exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import aggregator as agg
from . import autodiff as ad
from . import reliability as rel
from . import tokenizer as tok
from . import training as tr
from .config import ExperimentConfig, load_config, snapshot_config
from .events import (CohortSpec, cohort_observation_stats, load_events,
                     load_variable_names, synthesize_events, write_event_csvs)
from .model import (forward, init_model, load_checkpoint, prepare,
                    save_checkpoint, Normalizer)

logger = logging.getLogger("timeweave")


class UsageError(Exception):
    pass


def _load_cfg(cls, path, overrides):
    """Config problems (missing file, unknown key, bad value) are usage errors."""
    try:
        return load_config(cls, path, overrides or ())
    except (ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None


@contextlib.contextmanager
def output_dir(path):
    """Exclusive ownership of an output directory via a lockfile."""
    os.makedirs(path, exist_ok=True)
    lock = os.path.join(path, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output directory {path} is locked by another run "
            f"(remove {lock} if that run is dead)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        os.unlink(lock)


def _write_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)


def _load_dataset(data_dir, cfg: ExperimentConfig):
    names = load_variable_names(os.path.join(data_dir, "variables.txt"))
    windows = load_events(os.path.join(data_dir, "events.csv"),
                          os.path.join(data_dir, "labels.csv"),
                          grid_step=cfg.grid_step, t_max=cfg.t_max,
                          variable_names=names, min_events=cfg.min_events)
    if not windows:
        raise RuntimeError(f"no usable samples in {data_dir}")
    return windows, names


def cmd_gen_data(args):
    spec = _load_cfg(CohortSpec, args.config, args.set)
    with output_dir(args.out):
        events, labels = synthesize_events(spec)
        names = [f"v{i:02d}" for i in range(spec.n_vars)]
        write_event_csvs(events, labels, args.out, names)
        snapshot_config(spec, os.path.join(args.out, "cohort.effective.cfg"))
        logger.info("wrote %d events for %d patients to %s",
                    len(events), spec.n_patients, args.out)
    return 0


def _experiment_setup(args):
    cfg = _load_cfg(ExperimentConfig, args.config, args.set)
    windows, names = _load_dataset(args.data, cfg)
    splits = tr.make_splits(windows, cfg)
    return cfg, splits, names


def cmd_train(args):
    cfg, splits, names = _experiment_setup(args)
    with output_dir(args.out):
        snapshot_config(cfg, os.path.join(args.out, "train.effective.cfg"))
        result, report = tr.train_and_test(splits, cfg, seed=cfg.seed)
        save_checkpoint(os.path.join(args.out, "checkpoint.npz"),
                        result.params, result.normalizer, result.config, names)
        tr.write_log(os.path.join(args.out, "log.jsonl"), result.log)
        tr.write_csv(os.path.join(args.out, "metrics.csv"),
                     tr.results_csv_rows([("train_run", {cfg.seed: report})]))
        logger.info("test auroc=%.4f auprc=%.4f brier=%.4f ece=%.4f",
                    report.auroc, report.auprc, report.brier, report.ece)
        if result.diverged:
            logger.warning("run diverged; checkpoint is the best pre-divergence state")
    return 0


def cmd_eval(args):
    params, normalizer, cfg, names = load_checkpoint(args.checkpoint)
    windows, _ = _load_dataset(args.data, cfg)
    if args.split == "all":
        dataset = prepare(windows, normalizer)
    else:
        splits = tr.make_splits(windows, cfg)
        dataset = getattr(splits, args.split)
    report = tr.evaluate(params, dataset, cfg)
    with output_dir(args.out):
        snapshot_config(cfg, os.path.join(args.out, "eval.effective.cfg"))
        tr.write_csv(os.path.join(args.out, "metrics.csv"),
                     tr.results_csv_rows([("eval", {cfg.seed: report})]))
        logger.info("eval[%s] auroc=%.4f auprc=%.4f brier=%.4f ece=%.4f",
                    args.split, report.auroc, report.auprc, report.brier, report.ece)
    return 0


def cmd_ablate(args):
    cfg, splits, _ = _experiment_setup(args)
    if args.variants == "all":
        variants = None
    else:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    with output_dir(args.out):
        snapshot_config(cfg, os.path.join(args.out, "ablate.effective.cfg"))
        rows = tr.run_ablation(splits, cfg, variants=variants)
        tr.write_csv(os.path.join(args.out, "ablation.csv"), tr.results_csv_rows(rows))
        logger.info("wrote ablation table with %d variants", len(rows))
    return 0


def cmd_sweep(args):
    cfg, splits, _ = _experiment_setup(args)
    if args.axis == "scales":
        values = [tuple(float(x) for x in group.split(","))
                  for group in args.values.split("|")]
    else:
        values = [v.strip() for v in args.values.split(",") if v.strip()]
    with output_dir(args.out):
        snapshot_config(cfg, os.path.join(args.out, "sweep.effective.cfg"))
        rows = tr.run_sweep(splits, cfg, args.axis, values)
        tr.write_csv(os.path.join(args.out, "sweep.csv"), tr.results_csv_rows(rows))
    return 0


def cmd_decay_report(args):
    params, normalizer, cfg, names = load_checkpoint(args.checkpoint)
    windows, data_names = _load_dataset(args.data, cfg)
    names = names or data_names
    groups = rel.load_groups_csv(args.groups)
    rows = rel.decay_report(params.decay, names, groups, windows)
    with output_dir(args.out):
        _write_csv(os.path.join(args.out, "decay_report.csv"), rows)
    return 0


def _params_for_dump(args, cfg, n_vars):
    if args.checkpoint:
        params, normalizer, ck_cfg, _ = load_checkpoint(args.checkpoint)
        return params, normalizer, ck_cfg
    params = init_model(cfg, n_vars, cfg.seed)
    return params, None, cfg


def cmd_dump_tokens(args):
    cfg = _load_cfg(ExperimentConfig, args.config, args.set)
    windows, names = _load_dataset(args.data, cfg)
    params, normalizer, cfg = _params_for_dump(args, cfg, len(names))
    windows = windows[: args.samples]
    normalizer = normalizer or Normalizer.fit(windows)
    dataset = prepare(windows, normalizer)
    dim = params.embedding.var_table.shape[1]
    header = ["sample", "token", "timestep", "variable", "time_min", "time_norm",
              "value", "mask", "gap_min", "stale_norm", "stale_signed",
              "rel_weight"] + [f"z{d}" for d in range(dim)]
    rows = [header]
    with ad.no_grad():
        z = tok.embed_fields(dataset.time_norm, dataset.values, dataset.var_idx,
                             dataset.stale_signed, params.embedding,
                             include_stale=not cfg.no_dt_embedding).data
        rel_w = rel.reliability_weights(dataset.var_idx, dataset.mask,
                                        dataset.gap_min,
                                        rel.decay_rates(params.decay)).data
    n_vars = len(names)
    for b, w in enumerate(windows):
        for i in range(dataset.time_norm.size):
            rows.append([w.patient_id or b, i, i // n_vars,
                         names[dataset.var_idx[i]],
                         repr(float(w.times[i // n_vars])),
                         repr(float(dataset.time_norm[i])),
                         repr(float(dataset.values[b, i])),
                         int(dataset.mask[b, i]),
                         repr(float(dataset.gap_min[b, i])),
                         repr(float(dataset.stale_norm[b, i])),
                         repr(float(dataset.stale_signed[b, i])),
                         repr(float(rel_w[b, i]))]
                        + [repr(float(v)) for v in z[b, i]])
    with output_dir(args.out):
        _write_csv(os.path.join(args.out, "tokens.csv"), rows)
    return 0


def cmd_dump_buckets(args):
    cfg = _load_cfg(ExperimentConfig, args.config, args.set)
    windows, names = _load_dataset(args.data, cfg)
    params, normalizer, cfg = _params_for_dump(args, cfg, len(names))
    windows = windows[: args.samples]
    normalizer = normalizer or Normalizer.fit(windows)
    dataset = prepare(windows, normalizer)
    rows = [["sample", "scale_min", "bucket", "center_min", "n_members",
             "log1p_n_obs", "coverage", "log1p_eff_count", "mean_staleness"]]
    with ad.no_grad():
        rel_w = rel.reliability_weights(dataset.var_idx, dataset.mask,
                                        dataset.gap_min,
                                        rel.decay_rates(params.decay))
        for b, w in enumerate(windows):
            for s in cfg.scales:
                buckets = agg.bucketize(dataset.time_norm, s, dataset.t_max)
                rel_b = ad.Tensor(rel_w.data[b])
                for k, idx in buckets:
                    g = agg.bucket_stats(idx, dataset.mask[b], rel_b,
                                         dataset.stale_norm[b], eps=cfg.pool_eps)
                    rows.append([w.patient_id or b, int(s), k,
                                 repr(float(agg.bucket_center(k, s))), len(idx)]
                                + [repr(float(v)) for v in g.data])
    with output_dir(args.out):
        _write_csv(os.path.join(args.out, "buckets.csv"), rows)
    return 0


def cmd_dump_routing(args):
    cfg = _load_cfg(ExperimentConfig, args.config, args.set)
    if args.budget is not None:
        cfg = replace(cfg, budget=args.budget)
    windows, names = _load_dataset(args.data, cfg)
    params, normalizer, loaded_cfg = _params_for_dump(args, cfg, len(names))
    if args.checkpoint:
        cfg = replace(loaded_cfg,
                      budget=args.budget if args.budget else loaded_cfg.budget)
    windows = windows[: args.samples]
    normalizer = normalizer or Normalizer.fit(windows)
    dataset = prepare(windows, normalizer)
    rows = [["sample", "index", "scale_min", "center_min", "score", "selected"]]
    with ad.no_grad():
        res = forward(dataset, params, cfg, training=False, collect=True)
    diag = res.diagnostics
    for b, w in enumerate(windows):
        scores = diag["scores"]
        chosen = set() if diag["selected"] is None else set(np.atleast_2d(diag["selected"])[b])
        for i in range(diag["n_tokens"]):
            score_val = 0.0 if scores is None else float(np.atleast_2d(scores)[b, i])
            rows.append([w.patient_id or b, i,
                         int(cfg.scales[diag["scale_idx"][i]]),
                         repr(float(diag["centers"][i])),
                         repr(score_val), int(i in chosen)])
    with output_dir(args.out):
        _write_csv(os.path.join(args.out, "routing.csv"), rows)
    return 0


def cmd_cohort_stats(args):
    cfg = _load_cfg(ExperimentConfig, args.config, args.set)
    windows, names = _load_dataset(args.data, cfg)
    stats = cohort_observation_stats(windows)
    with output_dir(args.out):
        _write_csv(os.path.join(args.out, "cohort_stats.csv"),
                   list(stats.csv_rows(names)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="timeweave",
        description="reliability-weighted multi-scale encoder for irregular event streams")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, config=True):
        if config:
            p.add_argument("--config", default=None, help="key=value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="config override (repeatable)")
        if data:
            p.add_argument("--data", required=True, help="data directory")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="synthesize a cohort to CSV")
    common(p, data=False)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.set_defaults(fn=cmd_eval, set=None)

    p = sub.add_parser("ablate", help="run ablation variants")
    common(p)
    p.add_argument("--variants", default="all",
                   help="'all' or comma list of variant names")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep scales or budget")
    common(p)
    p.add_argument("--axis", required=True, choices=["scales", "budget"])
    p.add_argument("--values", required=True,
                   help="budget: comma list (or 'off'); scales: groups joined by '|'")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("decay-report", help="per-variable decay table")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--groups", required=True, help="variable,group CSV")
    p.set_defaults(fn=cmd_decay_report, set=None)

    for name, fn in (("dump-tokens", cmd_dump_tokens),
                     ("dump-buckets", cmd_dump_buckets),
                     ("dump-routing", cmd_dump_routing)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} CSV")
        common(p)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--samples", type=int, default=1)
        if name == "dump-routing":
            p.add_argument("--budget", type=int, default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("cohort-stats", help="label-group coverage/staleness diffs")
    common(p)
    p.set_defaults(fn=cmd_cohort_stats)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as exc:  # runtime failure with diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
