"""Twin-experiment runner.

Simulates a synthetic truth and observations from the chosen benchmark
system, runs each configured filter against them, records the per-step bias
(mean absolute deviation of the ensemble mean from the truth, averaged over
state components), repeats over independent trials and writes CSV artifacts.

Reproducibility: all randomness derives from ``numpy.random.SeedSequence``
with explicit spawn keys -- trial i uses ``SeedSequence(seed, spawn_key=(i,))``
children: key ``(i, 0)`` for the truth simulation and ``(i, 1 + f)`` for the
filter at position f in the canonical filter order.  Runs with the same
config and seed produce bit-identical CSVs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .dynamics import FisherModel, Lorenz96Model
from .ensemble import StateEnsemble
from .lmekf import GdConfig, GdTrace, lmekf_update
from .localization import LocalizationConfig, localized_update
from .obsmodel import PowerScaledNoiseModel

FILTER_NAMES = ("lmekf", "ekf", "enkf", "pf", "nleaf1", "nleaf2")
SYSTEMS = ("lorenz96", "fisher")


@dataclass(frozen=True)
class ExperimentConfig:
    system: str = "lorenz96"
    theta: float = 0.0
    ensemble_size: int = 100
    trials: int = 20
    time_steps: int = 40
    filters: tuple[str, ...] = ("lmekf", "enkf")
    loc_half_width: int | None = None
    loc_agg_half_width: int | None = None
    gd: GdConfig = field(default_factory=GdConfig)
    seed: int = 0
    obs_scale: float = 1.0
    noise_dof: float = 6.0

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}; choose from {SYSTEMS}")
        if self.time_steps < 1 or self.trials < 1:
            raise ValueError("time_steps and trials must be at least 1")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be at least 2")
        unknown = set(self.filters) - set(FILTER_NAMES)
        if unknown:
            raise ValueError(f"unknown filters {sorted(unknown)}; choose from {FILTER_NAMES}")
        if not self.filters:
            raise ValueError("at least one filter must be configured")
        if (self.loc_half_width is None) != (self.loc_agg_half_width is None):
            raise ValueError("localization needs both half widths or neither")
        object.__setattr__(self, "filters", tuple(self.filters))

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        """Load a JSON config; keyword overrides win over file values."""
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError("config file must contain a JSON object")
        gd_raw = raw.pop("gd", {})
        raw.update({k: v for k, v in overrides.items() if v is not None})
        gd_raw.update(overrides.get("gd_overrides") or {})
        raw.pop("gd_overrides", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "filters" in raw:
            raw["filters"] = tuple(raw["filters"])
        return cls(gd=GdConfig(**gd_raw), **raw)

    def build_model(self):
        return Lorenz96Model() if self.system == "lorenz96" else FisherModel()

    def build_obs(self, dim: int) -> PowerScaledNoiseModel:
        return PowerScaledNoiseModel(
            obs_dim=dim, theta=self.theta, a=self.obs_scale, noise_dof=self.noise_dof
        )

    def localization(self, dim: int) -> LocalizationConfig | None:
        if self.loc_half_width is None:
            return None
        return LocalizationConfig(
            half_width=self.loc_half_width,
            agg_half_width=self.loc_agg_half_width,
            state_dim=dim,
        )


@dataclass(frozen=True)
class RunRecord:
    trial: int
    time_step: int
    filter_name: str
    mean_abs_bias: float
    gd_iterations: int | None = None
    failed: bool = False


def _stream(config: ExperimentConfig, trial: int, slot: int) -> np.random.Generator:
    """Generator for a (trial, slot) pair; slot 0 is the truth simulation."""
    return np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(trial, slot))
    )


def simulate_truth(
    config: ExperimentConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Truth trajectory (T+1, d) including the initial state, and obs (T, d)."""
    model = config.build_model()
    obs = config.build_obs(model.dim)
    truth = np.empty((config.time_steps + 1, model.dim))
    ys = np.empty((config.time_steps, model.dim))
    truth[0] = model.sample_initial(rng, 1)[0]
    for t in range(1, config.time_steps + 1):
        truth[t] = model.step(truth[t - 1], rng)
        ys[t - 1] = obs.simulate(truth[t], rng)
    return truth, ys


def _make_update(name: str, gd: GdConfig, iteration_sink: list):
    """Uniform (ens, obs, y, rng) -> ens operator for a filter name."""
    if name == "lmekf":

        def update(ens, obs, y, rng):
            out, trace = lmekf_update(ens, obs, y, gd)
            iteration_sink.append(trace.iterations_used)
            return out

    elif name == "ekf":

        def update(ens, obs, y, rng):
            return baselines.ekf_update(ens, obs, y)

    elif name == "enkf":

        def update(ens, obs, y, rng):
            return baselines.stochastic_enkf_update(ens, obs, y, rng)

    elif name == "pf":

        def update(ens, obs, y, rng):
            return baselines.pf_update(ens, obs, y, rng)

    elif name in ("nleaf1", "nleaf2"):
        order = 1 if name == "nleaf1" else 2

        def update(ens, obs, y, rng):
            return baselines.nleaf_update(ens, obs, y, order, rng)

    else:
        raise ValueError(f"unknown filter {name!r}")
    return update


def run_filter(
    config: ExperimentConfig,
    filter_name: str,
    truth: np.ndarray,
    observations: np.ndarray,
    rng: np.random.Generator,
    trial: int = 0,
) -> tuple[list[RunRecord], np.ndarray]:
    """Run one filter over one truth/observation pair.

    Returns per-step records and the (T, d) per-component absolute bias.
    A filter-level failure produces failed records for the remaining steps
    instead of raising.
    """
    model = config.build_model()
    obs = config.build_obs(model.dim)
    loc = config.localization(model.dim)
    iteration_sink: list[int] = []
    update = _make_update(filter_name, config.gd, iteration_sink)

    ens = StateEnsemble(model.sample_initial(rng, config.ensemble_size))
    records: list[RunRecord] = []
    per_dim = np.full((config.time_steps, model.dim), np.nan)
    for t in range(1, config.time_steps + 1):
        y = observations[t - 1]
        try:
            # divergence shows up as overflow before the finiteness check
            # below converts it into a failed record; don't warn about it
            with np.errstate(over="ignore", invalid="ignore"):
                ens = StateEnsemble(model.step(ens.members, rng))
                # PF resamples globally; sliding-window localization wraps
                # the remaining filters when configured
                if loc is not None and filter_name != "pf":
                    ens = localized_update(ens, obs, y, loc, update, rng)
                else:
                    ens = update(ens, obs, y, rng)
            if not np.isfinite(ens.members).all():
                raise FloatingPointError("ensemble diverged to non-finite values")
        except Exception:
            records.extend(
                RunRecord(trial, step, filter_name, math.nan, None, failed=True)
                for step in range(t, config.time_steps + 1)
            )
            break
        abs_bias = np.abs(ens.members.mean(axis=0) - truth[t])
        per_dim[t - 1] = abs_bias
        iters = max(iteration_sink) if iteration_sink else None
        iteration_sink.clear()
        records.append(
            RunRecord(trial, t, filter_name, float(abs_bias.mean()), iters)
        )
    return records, per_dim


def gd_convergence_trace(config: ExperimentConfig, step: int, trial: int = 0) -> GdTrace:
    """Re-run the KL minimization at one time step and return its trace.

    With localization active, the trace of the window needing the most
    iterations is returned.
    """
    if not 1 <= step <= config.time_steps:
        raise ValueError("step out of range")
    truth, ys = simulate_truth(config, _stream(config, trial, 0))
    model = config.build_model()
    obs = config.build_obs(model.dim)
    loc = config.localization(model.dim)
    rng = _stream(config, trial, 1 + FILTER_NAMES.index("lmekf"))
    ens = StateEnsemble(model.sample_initial(rng, config.ensemble_size))
    traces: list[GdTrace] = []

    def tracked(e, o, y, r):
        out, trace = lmekf_update(e, o, y, config.gd)
        traces.append(trace)
        return out

    for t in range(1, step + 1):
        ens = StateEnsemble(model.step(ens.members, rng))
        traces.clear()
        if loc is not None:
            ens = localized_update(ens, obs, ys[t - 1], loc, tracked, rng)
        else:
            ens = tracked(ens, obs, ys[t - 1], rng)
    return max(traces, key=lambda tr: tr.iterations_used)


def _run_trial(args) -> tuple[list[RunRecord], dict[str, np.ndarray]]:
    config, trial = args
    truth, ys = simulate_truth(config, _stream(config, trial, 0))
    records: list[RunRecord] = []
    per_dim: dict[str, np.ndarray] = {}
    for name in config.filters:
        slot = 1 + FILTER_NAMES.index(name)
        recs, dims = run_filter(
            config, name, truth, ys, _stream(config, trial, slot), trial
        )
        records.extend(recs)
        per_dim[name] = dims
    return records, per_dim


def run_experiment(
    config: ExperimentConfig, out_dir: str | Path, workers: int = 1
) -> tuple[list[RunRecord], int]:
    """Run all trials, write records.csv / summary.csv / per_dim_bias.csv.

    Returns the raw records and an exit code: 0 on success, 2 if some filter
    failed in every trial.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(config, trial) for trial in range(config.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_trial, jobs))
    else:
        results = [_run_trial(job) for job in jobs]

    records = [rec for recs, _ in results for rec in recs]
    _write_records(out_dir / "records.csv", records)
    all_failed = _write_summary(out_dir / "summary.csv", config, records)
    _write_per_dim(out_dir / "per_dim_bias.csv", config, results)
    return records, (2 if all_failed else 0)


def _fmt(value: float) -> str:
    return "nan" if math.isnan(value) else repr(value)


def _write_records(path: Path, records: list[RunRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "time_step", "filter", "mean_abs_bias", "gd_iterations"])
        for r in records:
            writer.writerow(
                [
                    r.trial,
                    r.time_step,
                    r.filter_name,
                    _fmt(r.mean_abs_bias),
                    "" if r.gd_iterations is None else r.gd_iterations,
                ]
            )


def _write_summary(
    path: Path, config: ExperimentConfig, records: list[RunRecord]
) -> bool:
    """Trial-averaged summary; returns True if some filter failed everywhere."""
    failed_trials = {
        name: {r.trial for r in records if r.filter_name == name and r.failed}
        for name in config.filters
    }
    any_total_failure = any(
        len(failed) == config.trials for failed in failed_trials.values()
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_step", "filter", "avg_bias", "stderr", "failed_trials"])
        for t in range(1, config.time_steps + 1):
            for name in config.filters:
                vals = np.array(
                    [
                        r.mean_abs_bias
                        for r in records
                        if r.filter_name == name and r.time_step == t and not r.failed
                    ]
                )
                if len(vals) == 0:
                    avg, se = math.nan, math.nan
                else:
                    avg = float(vals.mean())
                    se = (
                        float(vals.std(ddof=1) / math.sqrt(len(vals)))
                        if len(vals) > 1
                        else 0.0
                    )
                writer.writerow(
                    [t, name, _fmt(avg), _fmt(se), len(failed_trials[name])]
                )
    return any_total_failure


def _write_per_dim(path: Path, config: ExperimentConfig, results) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_step", "dim", "filter", "abs_bias"])
        for name in config.filters:
            stacked = np.stack([per_dim[name] for _, per_dim in results])
            with np.errstate(invalid="ignore"), warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                avg = np.nanmean(stacked, axis=0)
            T, d = avg.shape
            for t in range(T):
                for i in range(d):
                    writer.writerow([t + 1, i, name, _fmt(float(avg[t, i]))])


def summarize_bias(
    records: list[RunRecord], filter_name: str, step_range: tuple[int, int]
) -> float:
    """Mean bias for one filter over an inclusive range of time steps."""
    lo, hi = step_range
    vals = [
        r.mean_abs_bias
        for r in records
        if r.filter_name == filter_name and lo <= r.time_step <= hi and not r.failed
    ]
    if not vals:
        return math.nan
    return float(np.mean(vals))
