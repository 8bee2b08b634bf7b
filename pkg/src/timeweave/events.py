"""Event-stream data model: grid construction, CSV ingestion, synthesis.

A sample is an :class:`EventWindow`: the regular-grid view of one patient's
irregular record. The grid has ``L = t_max / grid_step`` rows at times
``0, grid_step, 2*grid_step, ...``; within a grid cell the latest raw event
wins. ``gap[l, v]`` is the elapsed time (minutes, grid resolution) since the
last observation of variable ``v``; before the first observation it counts
from the window start.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_VARIABLES = (
    "heart_rate", "resp_rate", "sbp", "dbp", "temperature", "spo2",
    "ph", "glucose", "lactate", "creatinine", "bun", "wbc",
    "hemoglobin", "platelets", "sodium", "potassium", "bilirubin",
)


@dataclass
class EventRecord:
    """One raw observation: (patient, minutes since window start, variable, value)."""

    patient_id: str
    time_min: float
    variable: int
    value: float


@dataclass
class EventWindow:
    """Regular-grid view of one sample.

    values : (L, V) grid values, forward-filled; 0.0 before the first
        observation of a variable (placeholder, replaced downstream).
    mask : (L, V) 1.0 where the cell contains an observation.
    times : (L,) grid timestamps in minutes, strictly increasing.
    gap : (L, V) minutes since the last observation of each variable.
    """

    values: np.ndarray
    mask: np.ndarray
    times: np.ndarray
    gap: np.ndarray
    label: int
    t_max: float
    patient_id: str = ""

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        L, V = self.values.shape
        if self.mask.shape != (L, V) or self.gap.shape != (L, V):
            raise ValueError("mask/gap shape mismatch")
        if self.times.shape != (L,):
            raise ValueError("times shape mismatch")
        if not np.all(np.diff(self.times) > 0):
            raise ValueError("grid times must be strictly increasing")
        if self.times[0] < 0 or self.times[-1] > self.t_max:
            raise ValueError("grid times out of window")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite grid values")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")
        if (self.gap < 0).any() or (self.gap[self.mask == 1.0] != 0).any():
            raise ValueError("gap must be nonnegative and zero at observations")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


def build_grid(grid_step: float, t_max: float) -> np.ndarray:
    """Grid timestamps [0, step, ..., t_max - step]; step must divide t_max."""
    if grid_step <= 0 or t_max <= 0:
        raise ValueError("grid_step and t_max must be positive")
    n = t_max / grid_step
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"grid_step {grid_step} does not divide t_max {t_max}")
    return np.arange(round(n), dtype=np.float64) * grid_step


def window_from_events(events, label, grid_step, t_max, n_vars, patient_id="") -> EventWindow:
    """Rasterize raw events onto the grid (latest event per cell wins)."""
    times = build_grid(grid_step, t_max)
    L = times.size
    values = np.zeros((L, n_vars))
    mask = np.zeros((L, n_vars))
    last_time = np.full((L, n_vars), -np.inf)
    for ev in events:
        if not 0.0 <= ev.time_min <= t_max:
            raise ValueError(f"event time {ev.time_min} outside [0, {t_max}]")
        if not 0 <= ev.variable < n_vars:
            raise ValueError(f"variable index {ev.variable} out of range")
        row = min(int(ev.time_min // grid_step), L - 1)
        if ev.time_min >= last_time[row, ev.variable]:
            last_time[row, ev.variable] = ev.time_min
            values[row, ev.variable] = ev.value
            mask[row, ev.variable] = 1.0
    # forward fill values; gap counts grid time since last observed row
    gap = np.zeros((L, n_vars))
    last_row = np.full(n_vars, -1, dtype=np.intp)
    for l in range(L):
        observed = mask[l] == 1.0
        last_row[observed] = l
        seen = last_row >= 0
        gap[l, seen] = times[l] - times[last_row[seen]]
        gap[l, ~seen] = times[l] - times[0]
        fill = seen & ~observed
        if fill.any():
            values[l, fill] = values[last_row[fill], np.flatnonzero(fill)]
    win = EventWindow(values=values, mask=mask, times=times, gap=gap,
                      label=int(label), t_max=float(t_max), patient_id=patient_id)
    win.validate()
    return win


# --- CSV ingestion -----------------------------------------------------------

def load_variable_names(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        names = [line.strip() for line in f if line.strip()]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate variable names in {path}")
    return names


def _parse_variable(token: str, names: list[str] | None, n_vars: int, path, line_no: int) -> int:
    if names is not None and token in names:
        return names.index(token)
    try:
        idx = int(token)
    except ValueError:
        raise ValueError(
            f"{path}:{line_no}: unknown variable {token!r}") from None
    if not 0 <= idx < n_vars:
        raise ValueError(f"{path}:{line_no}: variable index {idx} out of range")
    return idx


def load_events(event_csv, label_csv, grid_step=60.0, t_max=2880.0,
                variable_names=None, n_vars=None, min_events=1) -> list[EventWindow]:
    """Read event/label CSVs and build one EventWindow per labelled patient.

    Patients with fewer than ``min_events`` raw events are excluded with a
    warning. Unknown variable names and malformed rows reject the file with
    the offending line number.
    """
    if variable_names is not None:
        n_vars = len(variable_names)
    if n_vars is None:
        raise ValueError("need variable_names or n_vars")

    labels: dict[str, int] = {}
    with open(label_csv, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["patient_id", "label"]:
            raise ValueError(f"{label_csv}: expected header patient_id,label")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            pid, lab = row[0], row[1]
            if pid in labels:
                raise ValueError(f"{label_csv}:{line_no}: duplicate patient {pid!r}")
            if lab not in ("0", "1"):
                raise ValueError(f"{label_csv}:{line_no}: label must be 0 or 1")
            labels[pid] = int(lab)

    per_patient: dict[str, list[EventRecord]] = {pid: [] for pid in labels}
    with open(event_csv, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["patient_id", "time_min", "variable", "value"]:
            raise ValueError(
                f"{event_csv}: expected header patient_id,time_min,variable,value")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            pid, t_str, var_tok, val_str = row
            if pid not in per_patient:
                raise ValueError(f"{event_csv}:{line_no}: patient {pid!r} has no label")
            var = _parse_variable(var_tok, variable_names, n_vars, event_csv, line_no)
            try:
                t = float(t_str)
                val = float(val_str)
            except ValueError:
                raise ValueError(f"{event_csv}:{line_no}: malformed number") from None
            if not (np.isfinite(t) and np.isfinite(val)):
                raise ValueError(f"{event_csv}:{line_no}: non-finite value")
            if not 0.0 <= t <= t_max:
                raise ValueError(
                    f"{event_csv}:{line_no}: time {t} outside [0, {t_max}]")
            per_patient[pid].append(EventRecord(pid, t, var, val))

    windows = []
    for pid, label in labels.items():
        events = per_patient[pid]
        if len(events) < max(min_events, 1):
            logger.warning("excluding patient %s: %d events (< %d required)",
                           pid, len(events), max(min_events, 1))
            continue
        windows.append(window_from_events(events, label, grid_step, t_max,
                                          n_vars, patient_id=pid))
    return windows


def write_event_csvs(events, labels, out_dir, variable_names):
    """Write events.csv / labels.csv / variables.txt under ``out_dir``."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    ev_path = os.path.join(out_dir, "events.csv")
    lab_path = os.path.join(out_dir, "labels.csv")
    var_path = os.path.join(out_dir, "variables.txt")
    with open(ev_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patient_id", "time_min", "variable", "value"])
        for ev in events:
            w.writerow([ev.patient_id, repr(float(ev.time_min)),
                        variable_names[ev.variable], repr(float(ev.value))])
    with open(lab_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patient_id", "label"])
        for pid, lab in labels:
            w.writerow([pid, lab])
    with open(var_path, "w", encoding="utf-8") as f:
        f.write("\n".join(variable_names) + "\n")
    return ev_path, lab_path, var_path


# --- synthetic cohorts ---------------------------------------------------------

@dataclass
class CohortSpec:
    """Knobs for the synthetic irregular-cohort generator.

    Variables split into a frequently-sampled "vital-like" block (indices
    ``0 .. n_vital-1``) and a sparse "lab-like" block. Positive-label samples
    get (a) a transient value excursion on ``drift_vars`` after a random
    onset and (b) a late-window observation-rate boost on the vital block;
    both effects scale linearly with ``strength``, so ``strength=0`` makes
    the label pure noise.
    """

    n_patients: int = 1000
    n_vars: int = 17
    t_max: float = 2880.0
    grid_step: float = 60.0
    prevalence: float = 0.15
    n_vital: int = 6
    vital_rate: float = 0.55     # per-hour observation probability
    lab_rate: float = 0.12
    strength: float = 0.0        # informative-missingness + drift scale
    rate_boost: float = 0.8      # peak relative rate increase, scaled by strength
    drift_amp: float = 1.0       # peak excursion in baseline-noise units
    noise: float = 0.3
    min_events: int = 1
    seed: int = 0
    drift_vars: tuple = field(default=())

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must be in (0, 1)")
        if not (0.0 < self.vital_rate <= 1.0 and 0.0 < self.lab_rate <= 1.0):
            raise ValueError("observation rates must be in (0, 1]")
        if self.n_patients < 1 or self.n_vars < 1:
            raise ValueError("degenerate cohort size")
        if not 0 <= self.n_vital <= self.n_vars:
            raise ValueError("n_vital out of range")
        if not self.drift_vars:
            # default: first half of vitals plus the first three labs
            vit = tuple(range(self.n_vital // 2 + 1))
            lab = tuple(range(self.n_vital, min(self.n_vital + 3, self.n_vars)))
            self.drift_vars = vit + lab

    def base_rates(self) -> np.ndarray:
        r = np.full(self.n_vars, self.lab_rate)
        r[: self.n_vital] = self.vital_rate
        return r

    def boost_weight(self, t: np.ndarray) -> np.ndarray:
        """Late-window weight in [0, 1] for the positive-cohort rate boost."""
        return np.clip((np.asarray(t) - 0.55 * self.t_max) / (0.3 * self.t_max), 0.0, 1.0)

    def expected_coverage_margin(self) -> float:
        """Generator-declared target: mean positive-minus-negative coverage of
        the vital block over the boosted part of the window."""
        times = build_grid(self.grid_step, self.t_max)
        w = self.boost_weight(times)
        late = w > 0
        if not late.any():
            return 0.0
        rate = self.vital_rate
        boosted = np.minimum(1.0, rate * (1.0 + self.strength * self.rate_boost * w[late]))
        return float(np.mean(boosted - rate))


def _sample_events(spec: CohortSpec, pid: str, rng: np.random.Generator):
    """Generate one patient's raw events and label."""
    label = int(rng.random() < spec.prevalence)
    times = build_grid(spec.grid_step, spec.t_max)
    L, V = times.size, spec.n_vars
    rates = np.broadcast_to(spec.base_rates(), (L, V)).copy()
    onset = rng.uniform(0.3, 0.7) * spec.t_max
    if label:
        boost = 1.0 + spec.strength * spec.rate_boost * spec.boost_weight(times)
        rates[:, : spec.n_vital] *= boost[:, None]
        rates = np.minimum(rates, 1.0)
    observe = rng.random((L, V)) < rates

    # latent per-variable trajectories: AR(1) around a patient-specific level
    level = rng.normal(0.0, 1.0, size=V)
    steps = rng.normal(0.0, 0.35, size=(L, V))
    traj = np.empty((L, V))
    traj[0] = level + steps[0]
    for l in range(1, L):
        traj[l] = level + 0.9 * (traj[l - 1] - level) + steps[l]
    if label and spec.strength > 0:
        width = 0.15 * spec.t_max
        bump = spec.strength * spec.drift_amp * np.exp(-((times - onset) / width) ** 2)
        traj[:, list(spec.drift_vars)] += bump[:, None]

    jitter = rng.uniform(0.0, spec.grid_step, size=(L, V))
    noise = rng.normal(0.0, spec.noise, size=(L, V))
    events = []
    for l in range(L):
        for v in np.flatnonzero(observe[l]):
            t = min(times[l] + jitter[l, v], spec.t_max)
            events.append(EventRecord(pid, float(t), int(v),
                                      float(traj[l, v] + noise[l, v])))
    return events, label


def synthesize_events(spec: CohortSpec):
    """All raw events plus (patient_id, label) pairs; deterministic per seed.

    Per-sample RNG streams are derived from the master seed, so generation is
    order-independent and safe to parallelize by sample.
    """
    all_events = []
    labels = []
    for i in range(spec.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=spec.seed, spawn_key=(i,)))
        pid = f"p{i:06d}"
        events, label = _sample_events(spec, pid, rng)
        all_events.extend(events)
        labels.append((pid, label))
    return all_events, labels


def synthesize_cohort(spec: CohortSpec) -> list[EventWindow]:
    """Windows built from the synthetic event stream via the shared grid path."""
    events, labels = synthesize_events(spec)
    per_patient: dict[str, list[EventRecord]] = {pid: [] for pid, _ in labels}
    for ev in events:
        per_patient[ev.patient_id].append(ev)
    windows = []
    for pid, label in labels:
        evs = per_patient[pid]
        if len(evs) < max(spec.min_events, 1):
            logger.warning("excluding patient %s: %d events", pid, len(evs))
            continue
        windows.append(window_from_events(evs, label, spec.grid_step, spec.t_max,
                                          spec.n_vars, patient_id=pid))
    return windows


# --- cohort diagnostics --------------------------------------------------------

@dataclass
class CohortStats:
    """Per-(timestep, variable) coverage/staleness by label group and their
    positive-minus-negative differences."""

    times: np.ndarray
    coverage_pos: np.ndarray
    coverage_neg: np.ndarray
    staleness_pos: np.ndarray
    staleness_neg: np.ndarray

    @property
    def d_coverage(self) -> np.ndarray:
        return self.coverage_pos - self.coverage_neg

    @property
    def d_staleness(self) -> np.ndarray:
        return self.staleness_pos - self.staleness_neg

    def csv_rows(self, variable_names=None):
        L, V = self.coverage_pos.shape
        names = variable_names or [str(v) for v in range(V)]
        yield ["timestep", "time_min", "variable",
               "coverage_pos", "coverage_neg", "d_coverage",
               "staleness_pos", "staleness_neg", "d_staleness"]
        for l in range(L):
            for v in range(V):
                yield [l, repr(float(self.times[l])), names[v],
                       repr(float(self.coverage_pos[l, v])),
                       repr(float(self.coverage_neg[l, v])),
                       repr(float(self.d_coverage[l, v])),
                       repr(float(self.staleness_pos[l, v])),
                       repr(float(self.staleness_neg[l, v])),
                       repr(float(self.d_staleness[l, v]))]


def cohort_observation_stats(windows) -> CohortStats:
    """Mean mask and mean normalized staleness per cell, split by label."""
    pos = [w for w in windows if w.label == 1]
    neg = [w for w in windows if w.label == 0]
    if not pos or not neg:
        raise ValueError("need at least one sample per label group")

    def group_stats(group):
        mask = np.mean([w.mask for w in group], axis=0)
        stale = np.mean([np.log1p(w.gap) / np.log1p(w.t_max) for w in group], axis=0)
        return mask, np.clip(stale, 0.0, 1.0)

    cov_p, st_p = group_stats(pos)
    cov_n, st_n = group_stats(neg)
    return CohortStats(times=pos[0].times.copy(), coverage_pos=cov_p,
                       coverage_neg=cov_n, staleness_pos=st_p, staleness_neg=st_n)
