"""Flat key=value configuration with typed parsing and snapshots.

Config files are plain ``key = value`` lines ('#' comments allowed); list
values are comma-separated. Unknown keys are rejected. Every run writes back
an effective-config snapshot that re-parses to the identical configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

WEAVING_MODES = ("chronological", "none", "random")


@dataclass
class ExperimentConfig:
    """All model/training knobs; defaults are the tuned settings."""

    # optimization
    lr: float = 5.904e-4
    weight_decay: float = 1.709e-6
    dropout: float = 0.032
    grad_clip: float = 0.5
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    # model dimensions
    d_model: int = 96
    n_layers: int = 5
    d_state: int = 96
    d_conv: int = 2
    expand: int = 3
    # reliability gate
    lambda_min: float = 4.289e-4
    init_decay_logit: float = -2.717
    # aggregation and routing
    scales: tuple = (60.0, 120.0, 240.0)
    budget: int = 32
    pool_eps: float = 1e-8
    pooling: str = "last"
    # ablation switches
    no_reliability_gate: bool = False
    no_dt_embedding: bool = False
    no_stats_augment: bool = False
    no_token_router: bool = False
    weaving: str = "chronological"
    # data / splits
    grid_step: float = 60.0
    t_max: float = 2880.0
    min_events: int = 1
    split_seed: int = 1729

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise ValueError("bad regularization settings")
        if self.grad_clip <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("bad optimization settings")
        if min(self.d_model, self.n_layers, self.d_state, self.d_conv,
               self.expand) < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.lambda_min <= 0:
            raise ValueError("lambda_min must be positive")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.pooling != "last":
            raise ValueError(f"unsupported pooling {self.pooling!r}")
        if self.weaving not in WEAVING_MODES:
            raise ValueError(f"weaving must be one of {WEAVING_MODES}")
        s = [float(x) for x in self.scales]
        if not s or any(x <= 0 for x in s) or len(set(s)) != len(s) or s != sorted(s):
            raise ValueError("scales must be positive, unique, ascending")
        if self.grid_step <= 0 or self.t_max <= 0:
            raise ValueError("grid settings must be positive")

    def ablation_flags(self):
        return {
            "no_reliability_gate": self.no_reliability_gate,
            "no_dt_embedding": self.no_dt_embedding,
            "no_stats_augment": self.no_stats_augment,
            "no_token_router": self.no_token_router,
        }


def _parse_value(field: dataclasses.Field, raw: str):
    raw = raw.strip()
    typ = field.type
    if typ in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{field.name}: expected a boolean, got {raw!r}")
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    if typ in ("tuple", tuple):
        if not raw:
            return ()
        parts = [p.strip() for p in raw.split(",")]
        default = field.default if field.default is not dataclasses.MISSING else ()
        if isinstance(default, tuple) and default:
            elem = type(default[0])
            return tuple(elem(p) for p in parts)
        return tuple(int(p) if p.lstrip("+-").isdigit() else float(p) for p in parts)
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_assignments(lines, path="<config>"):
    """Yield (key, raw_value) from key=value lines; reject malformed ones."""
    for i, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{i}: expected key=value, got {line.rstrip()!r}")
        key, raw = stripped.split("=", 1)
        yield key.strip(), raw.strip()


def load_config(cls, path=None, overrides=()):
    """Instance of ``cls`` from defaults, then file, then override pairs.

    The dataclass is constructed once from the merged assignments so its own
    construction-time validation sees the final values.
    """
    by_name = {f.name: f for f in fields(cls)}
    kwargs = {}

    def absorb(assignments, src):
        for key, raw in assignments:
            if key not in by_name:
                raise ValueError(f"{src}: unknown config key {key!r}")
            kwargs[key] = _parse_value(by_name[key], raw)

    if path is not None:
        with open(path, encoding="utf-8") as f:
            absorb(parse_assignments(f, path), path)
    absorb(parse_assignments(overrides, "<override>"), "<override>")
    cfg = cls(**kwargs)
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg


def snapshot_config(cfg, path) -> None:
    """Write every field as key=value; reparsing reproduces ``cfg``."""
    with open(path, "w", encoding="utf-8") as f:
        for fld in fields(cfg):
            f.write(f"{fld.name} = {_format_value(getattr(cfg, fld.name))}\n")


def config_dict(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
