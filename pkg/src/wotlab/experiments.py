"""Experiment drivers behind the ``wotlab`` command line.

Every driver takes an :class:`ExperimentConfig`, writes CSV tables (the
source of truth), SVG figures derived from them and a ``report.json``, and
returns an :class:`ExperimentReport`. ``metrics.csv`` always holds exactly
the report's metric map.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import cost as cost_mod
from . import dist as dist_mod
from .cost import DistanceInduced, WeakCostSpec
from .dist import Gaussian, sample
from .dwot import (FwConfig, FwResult, conditional_profile, plan_stats, solve_frank_wolfe,
                   write_plan_csv)
from .nnot import NotConfig, TrainingDiverged, map_samples, train_not
from .oracle import UnsupportedProjection, fake_solution_diagnostic, w2_gamma_squared_gaussian
from .rng import derive_seed, stream
from .svg import Group, Series, write_svg_lines, write_svg_scatter

EXPERIMENTS = ("toy1d", "toy2d", "fake_demo", "gamma_sweep", "dwot_solve", "checks")

# Acceptance thresholds for "learned Q" / "failed", in units of the MMD baseline.
LEARNED_MULTIPLE = 3.0
FAILED_MULTIPLE = 5.0

# Conditional-profile agreement thresholds (fractions of std(Q)).
MEAN_PROFILE_TOL = 0.2
STD_PROFILE_TOL = 0.3
PROFILE_GRID = 50

STATUS_EXIT = {"ok": 0, "check_failed": 1, "config_error": 2, "diverged": 3}

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


class ConfigError(ValueError):
    """Malformed or incomplete experiment configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_TRAINER_KEYS = {f.name for f in dataclasses.fields(NotConfig)} - {"cost", "latent"}
_SOLVER_KEYS = {f.name for f in dataclasses.fields(FwConfig)}


@dataclass
class ExperimentConfig:
    experiment: str
    source: Optional[dist_mod.DistributionSpec] = None
    target: Optional[dist_mod.DistributionSpec] = None
    cost: Optional[WeakCostSpec] = None
    trainer: dict = field(default_factory=dict)
    solver: FwConfig = field(default_factory=FwConfig)
    n_samples: int = 1000
    seed: int = 0
    out_dir: str = "runs"
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        unknown = set(self.trainer) - _TRAINER_KEYS
        if unknown:
            raise ConfigError(f"unknown trainer keys: {sorted(unknown)}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        for name in _REQUIRED.get(self.experiment, ()):
            if getattr(self, name) is None:
                raise ConfigError(f"experiment {self.experiment!r} needs a [{name}] section")
        if self.source is not None and self.target is not None and self.source.dim != self.target.dim:
            raise ConfigError("source and target dimensions differ")

    def not_config(self, cost: WeakCostSpec, seed: Optional[int] = None) -> NotConfig:
        kwargs = dict(self.trainer)
        kwargs.setdefault("latent_dim", self.source.dim)
        kwargs["seed"] = self.seed if seed is None else seed
        try:
            return NotConfig(cost=cost, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid trainer section: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "source": None if self.source is None else dist_mod.spec_to_dict(self.source),
            "target": None if self.target is None else dist_mod.spec_to_dict(self.target),
            "cost": None if self.cost is None else _cost_to_dict(self.cost),
            "trainer": dict(self.trainer),
            "solver": {"max_iters": self.solver.max_iters, "gap_tol": self.solver.gap_tol,
                       "line_search": self.solver.line_search.value},
            "n_samples": self.n_samples,
            "seed": self.seed,
            "out_dir": str(self.out_dir),
            "options": _jsonable(self.options),
        }


_REQUIRED = {
    "toy1d": ("source", "target"),
    "toy2d": ("source", "target", "cost"),
    "fake_demo": ("source", "target"),
    "gamma_sweep": ("source", "target", "cost"),
    "dwot_solve": ("source", "target", "cost"),
}


def _cost_to_dict(spec: WeakCostSpec) -> dict:
    return {"gamma": spec.gamma, "kernel": cost_mod.kernel_to_dict(spec.kernel)}


def cost_from_dict(data: dict) -> WeakCostSpec:
    try:
        kernel = cost_mod.kernel_from_dict(data.get("kernel", {"type": "Bilinear"}))
        return WeakCostSpec(kernel, float(data["gamma"]))
    except KeyError as exc:
        raise ConfigError(f"cost section is missing {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _spec(data) -> Optional[dist_mod.DistributionSpec]:
    if data is None:
        return None
    try:
        return dist_mod.spec_from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad distribution {data!r}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    if "experiment" not in data:
        raise ConfigError("config needs an 'experiment' key")
    solver = dict(data.pop("solver", {}))
    unknown = set(solver) - _SOLVER_KEYS
    if unknown:
        raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
    try:
        fw = FwConfig(**solver)
    except ValueError as exc:
        raise ConfigError(f"invalid solver section: {exc}") from exc
    known = {"experiment", "source", "target", "cost", "trainer", "n_samples", "seed", "out_dir", "options"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    try:
        return ExperimentConfig(
            experiment=data["experiment"],
            source=_spec(data.get("source")),
            target=_spec(data.get("target")),
            cost=None if data.get("cost") is None else cost_from_dict(data["cost"]),
            trainer=dict(data.get("trainer", {})),
            solver=fw,
            n_samples=int(data.get("n_samples", 1000)),
            seed=int(data.get("seed", 0)),
            out_dir=str(data.get("out_dir", "runs")),
            options=dict(data.get("options", {})),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    """Read a TOML config file."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Reports and tables
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    metrics: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    wall_time: float = 0.0
    version: str = __version__
    status: str = "ok"
    details: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return STATUS_EXIT[self.status]

    def fail(self, status: str, note: str) -> None:
        # divergence outranks a failed check
        if STATUS_EXIT[status] > STATUS_EXIT[self.status]:
            self.status = status
        self.details.setdefault("failures", []).append(note)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "metrics": self.metrics,
            "artifacts": sorted(self.artifacts),
            "wall_time": self.wall_time,
            "version": self.version,
            "status": self.status,
            "details": _jsonable(self.details),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v) + 0.0:.10g}"  # + 0.0 folds -0 into 0


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def read_metrics_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {name: float(value) for name, value in rows[1:]}


class _Run:
    """Bookkeeping shared by the drivers: output dir, artifacts, metrics."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out = Path(config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.report = ExperimentReport(config.experiment, config.to_dict())
        self.start = time.perf_counter()

    def path(self, name: str) -> Path:
        self.report.artifacts.append(name)
        return self.out / name

    def metric(self, name: str, value) -> None:
        value = float(value)
        if not math.isfinite(value):
            self.report.fail("check_failed", f"metric {name} is not finite")
            return
        self.report.metrics[name] = value

    def finish(self) -> ExperimentReport:
        items = sorted(self.report.metrics.items())
        write_table(self.path("metrics.csv"), ("name", "value"), items)
        # the CSV is the source of truth: report exactly what was written
        self.report.metrics = read_metrics_csv(self.out / "metrics.csv")
        self.report.wall_time = time.perf_counter() - self.start
        self.path("report.json")
        with open(self.out / "report.json", "w") as fh:
            json.dump(self.report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return self.report


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------

def mmd_baseline(q, n: int, seed: int, resamples: int = 200, quantile: float = 0.95) -> float:
    """Upper quantile of U-statistic MMD^2 between two fresh size-n samples of q."""
    rng = stream(seed, "mmd-baseline")
    kernel = DistanceInduced(1.0)
    vals = [cost_mod.mmd_squared(kernel, dist_mod.draw(q, n, rng), dist_mod.draw(q, n, rng), "U")
            for _ in range(resamples)]
    return float(np.quantile(vals, quantile))


def _oracle_for(p, q, gamma):
    """(verdict string, potential or None) for Gaussian pairs; 'n/a' otherwise."""
    if not (isinstance(p, Gaussian) and isinstance(q, Gaussian)) or gamma <= 0:
        return "n/a", None
    try:
        report = fake_solution_diagnostic(p, q, gamma)
    except UnsupportedProjection:
        return "UNSUPPORTED", None
    return report.verdict.value, report.potential


def _trace_rows(trace):
    return [[r["iter"], r["mmd_sq"], r.get("barycentric_error"), r["t_loss"], r["f_value"]]
            for r in trace.records]


def _train(run: _Run, name: str, p, q, cost: WeakCostSpec, potential, seed: int):
    """Train one map, write its trace, return the TrainResult or None on divergence."""
    cfg = run.config.not_config(cost, seed)
    try:
        result = train_not(p, q, cfg, oracle_hook=potential)
    except TrainingDiverged as exc:
        run.report.fail("diverged", f"{name}: {exc}")
        return None, cfg
    result.trace.write_csv(run.path(f"trace_{name}.csv"))
    return result, cfg


def _neural_metrics(run: _Run, name: str, result, baseline: float) -> dict:
    trace = result.trace
    final = trace.records[-1]
    trailing = trace.trailing("mmd_sq", trace.checkpoints.maxlen)
    vals = {
        "final_mmd_sq": final["mmd_sq"],
        "trailing_median_mmd_sq": float(np.median(trailing)),
        "trailing_std_mmd_sq": float(trailing.std()),
        "final_mmd_ratio": final["mmd_sq"] / baseline,
        "learned_q": float(final["mmd_sq"] <= LEARNED_MULTIPLE * baseline),
    }
    if final.get("barycentric_error") is not None:
        vals["final_barycentric_error"] = final["barycentric_error"]
        vals["trailing_median_barycentric_error"] = float(np.median(trace.trailing("barycentric_error")))
    for key, value in vals.items():
        run.metric(f"{name}.{key}", value)
    return vals


def _scatter_2d(run: _Run, name: str, T, cfg: NotConfig, p, q, potential) -> None:
    seed = derive_seed(run.config.seed, f"scatter-{name}")
    xs = sample(p, 256, seed)
    grouped = map_samples(T, xs, 8, cfg.latent, seed)
    groups = [
        Group(sample(q, 1024, seed + 1).points, "#bbbbbb", "target Q", 1.2, 0.5),
        Group(grouped.outputs.reshape(-1, grouped.outputs.shape[-1]), "#2ca02c", "T(x,z)", 1.2, 0.35),
        Group(xs.points, "#1f77b4", "inputs x", 1.6, 0.8),
        Group(grouped.conditional_means(), "#d62728", "mean_z T(x,z)", 1.6, 0.8),
    ]
    if potential is not None:
        groups.append(Group(potential(xs.points[:64]), "#000000", "oracle map", 1.0, 0.9))
    write_svg_scatter(groups, run.path(f"scatter_{name}.svg"), bounds=(-3.5, 3.5, -3.5, 3.5), title=name)


def _mmd_plot(run: _Run, traces: dict, baseline: float, filename: str = "mmd.svg") -> None:
    series = [Series(tr.column("iter"), tr.column("mmd_sq"), _COLORS[i % len(_COLORS)], name)
              for i, (name, tr) in enumerate(traces.items())]
    if series:
        xs = series[0].x
        series.append(Series([xs[0], xs[-1]], [baseline, baseline], "#777777", "baseline"))
    write_svg_lines(series, run.path(filename), title="MMD^2 vs iteration")


# ---------------------------------------------------------------------------
# fake_demo and toy2d
# ---------------------------------------------------------------------------

DEFAULT_FAKE_RUNS = (
    {"name": "bilinear_g0.5", "kernel": {"type": "Bilinear"}, "gamma": 0.5},
    {"name": "bilinear_g0.75", "kernel": {"type": "Bilinear"}, "gamma": 0.75},
    {"name": "bilinear_g1", "kernel": {"type": "Bilinear"}, "gamma": 1.0},
    {"name": "distance_g1", "kernel": {"type": "DistanceInduced", "alpha": 1.0}, "gamma": 1.0},
)


def run_fake_demo(config: ExperimentConfig, only: Optional[str] = None) -> ExperimentReport:
    """Bilinear weak costs at several gammas next to a distance-kernel run.

    For Gaussian pairs each run carries the oracle verdict and the barycentric
    error against the optimal restricted potential's gradient.
    """
    run = _Run(config)
    p, q = config.source, config.target
    runs = [dict(r) for r in config.options.get("runs", DEFAULT_FAKE_RUNS)]
    if only is not None:
        runs = [r for r in runs if r["name"] == only]
        if not runs:
            raise ConfigError(f"no run named {only!r}")
    cfg_probe = config.not_config(WeakCostSpec(DistanceInduced(1.0), 1.0))
    baseline = mmd_baseline(q, cfg_probe.n_eval, derive_seed(config.seed, "baseline"))
    run.metric("baseline_mmd_sq", baseline)
    verdicts, traces, summary = {}, {}, {}
    for spec_dict in runs:
        name = spec_dict["name"]
        cost = cost_from_dict(spec_dict)
        verdict, potential = _oracle_for(p, q, cost.gamma)
        verdicts[name] = verdict
        result, cfg = _train(run, name, p, q, cost, potential, config.seed)
        if result is None:
            continue
        summary[name] = _neural_metrics(run, name, result, baseline)
        traces[name] = result.trace
        if p.dim == 2:
            _scatter_2d(run, name, result.T, cfg, p, q, potential)
    if traces:
        _mmd_plot(run, traces, baseline)
    run.report.details["verdicts"] = verdicts
    run.report.details["contrast"] = {
        name: ("learned Q" if m["learned_q"] else
               "failed" if m["final_mmd_ratio"] >= FAILED_MULTIPLE else "inconclusive")
        for name, m in summary.items()
    }
    return run.finish()


def run_toy2d(config: ExperimentConfig) -> ExperimentReport:
    """One neural run on a configured pair (e.g. Gaussian to 8 Gaussians or Swiss roll)."""
    run = _Run(config)
    p, q, cost = config.source, config.target, config.cost
    verdict, potential = _oracle_for(p, q, cost.gamma) if isinstance(cost.kernel, cost_mod.Bilinear) else ("n/a", None)
    cfg_probe = config.not_config(cost)
    baseline = mmd_baseline(q, cfg_probe.n_eval, derive_seed(config.seed, "baseline"))
    run.metric("baseline_mmd_sq", baseline)
    result, cfg = _train(run, "map", p, q, cost, potential, config.seed)
    if result is not None:
        _neural_metrics(run, "map", result, baseline)
        if p.dim == 2:
            _scatter_2d(run, "map", result.T, cfg, p, q, potential)
        _mmd_plot(run, {"map": result.trace}, baseline)
    run.report.details["verdict"] = verdict
    return run.finish()


# ---------------------------------------------------------------------------
# Discrete experiments
# ---------------------------------------------------------------------------

def _discrete_samples(config: ExperimentConfig, n: Optional[int] = None):
    n = n or config.n_samples
    xs = sample(config.source, n, derive_seed(config.seed, "x")).points
    ys = sample(config.target, n, derive_seed(config.seed, "y")).points
    return xs, ys


def _solve(run: _Run, spec: WeakCostSpec, xs, ys, label: str) -> FwResult:
    result = solve_frank_wolfe(spec, xs, ys, config=run.config.solver)
    if not result.converged:
        run.report.fail("check_failed", f"{label}: solver stopped at gap {result.gap:.3g} "
                                        f"after {len(result.trace) - 1} iterations")
    return result


def _fw_trace_rows(result: FwResult):
    return [[t["iter"], t["objective"], t["gap"], t["step"]] for t in result.trace]


def run_dwot_solve(config: ExperimentConfig) -> ExperimentReport:
    """Single discrete weak-OT solve on fresh samples; writes the plan."""
    run = _Run(config)
    spec = config.cost
    xs, ys = _discrete_samples(config)
    result = _solve(run, spec, xs, ys, "solve")
    stats = plan_stats(spec, xs, ys, result.plan)
    write_plan_csv(result.plan, run.path("plan.csv"))
    write_table(run.path("trace.csv"), ("iter", "objective", "gap", "step"), _fw_trace_rows(result))
    write_svg_lines([Series([t["iter"] for t in result.trace], [t["objective"] for t in result.trace],
                            _COLORS[0], "objective")], run.path("objective.svg"), title="FW objective")
    run.metric("objective", result.objective)
    run.metric("gap", result.gap)
    run.metric("iterations", len(result.trace) - 1)
    run.metric("converged", float(result.converged))
    run.metric("cvar", stats.cvar)
    run.metric("dist_sq", stats.dist_sq)
    p, q = config.source, config.target
    if isinstance(spec.kernel, cost_mod.Bilinear) and isinstance(p, Gaussian) and isinstance(q, Gaussian) \
            and spec.gamma > 0:
        try:
            oracle = w2_gamma_squared_gaussian(p, q, spec.gamma)
        except UnsupportedProjection:
            pass
        else:
            run.metric("oracle_value", oracle)
            run.metric("oracle_rel_err", abs(result.objective - oracle) / abs(oracle))
    if result.warnings:
        run.report.details["warnings"] = result.warnings
    return run.finish()


DEFAULT_SWEEP = (0.0, 1 / 3, 2 / 3, 1.0)
MONOTONE_SLACK = 1e-6


def run_gamma_sweep(config: ExperimentConfig) -> ExperimentReport:
    """Discrete solutions over a gamma grid on one fixed sample set."""
    run = _Run(config)
    gammas = [float(g) for g in config.options.get("gammas", DEFAULT_SWEEP)]
    if not gammas:
        raise ConfigError("gamma grid is empty")
    xs, ys = _discrete_samples(config)
    rows = []
    for g in gammas:
        spec = WeakCostSpec(config.cost.kernel, g)
        result = _solve(run, spec, xs, ys, f"gamma={g:.6g}")
        stats = plan_stats(spec, xs, ys, result.plan)
        rows.append([g, stats.cvar, stats.dist_sq, stats.cost, result.gap, len(result.trace) - 1])
    write_table(run.path("sweep.csv"), ("gamma", "cvar", "dist_sq", "cost", "gap", "iterations"), rows)
    table = np.array([r[:4] for r in rows])
    order = np.argsort(table[:, 0], kind="stable")
    cvar, dist_sq, value = table[order, 1], table[order, 2], table[order, 3]
    checks = {
        "cvar_nondecreasing": bool(np.all(np.diff(cvar) >= -MONOTONE_SLACK)),
        "dist_sq_nondecreasing": bool(np.all(np.diff(dist_sq) >= -MONOTONE_SLACK)),
        "value_nonincreasing": bool(np.all(np.diff(value) <= MONOTONE_SLACK)),
    }
    for name, ok in checks.items():
        run.metric(name, float(ok))
        if not ok:
            run.report.fail("check_failed", f"{name} violated")
    gs = table[order, 0]
    write_svg_lines([Series(gs, cvar, _COLORS[0], "CVar"), Series(gs, dist_sq, _COLORS[1], "Dist^2"),
                     Series(gs, value, _COLORS[2], "Cost")], run.path("sweep.svg"), title="gamma sweep")
    return run.finish()


# ---------------------------------------------------------------------------
# toy1d: neural vs discrete
# ---------------------------------------------------------------------------

def binned_profile(xs, row_mean, row_var, bins: int = PROFILE_GRID):
    """Equal-count bins along x: (bin centre, mean of row means, sqrt of mean row variance)."""
    xs = np.asarray(xs, dtype=float).reshape(-1)
    order = np.argsort(xs, kind="stable")
    groups = np.array_split(order, bins)
    centre = np.array([xs[g].mean() for g in groups])
    mean = np.array([row_mean[g].mean() for g in groups])
    std = np.sqrt(np.array([row_var[g].mean() for g in groups]))
    return centre, mean, std


def _plan_pairs(plan, ys, seed: int, per_row: int = 1):
    """Draw (row, column) pairs from a discrete plan for scatter plots."""
    rng = stream(seed, "plan-pairs")
    cond = plan.matrix / plan.p[:, None]
    cdf = np.cumsum(cond, axis=1)
    u = rng.uniform(size=(cond.shape[0], per_row)) * cdf[:, -1:]
    cols = np.array([np.searchsorted(cdf[i], u[i], side="right") for i in range(cond.shape[0])])
    cols = np.minimum(cols, cond.shape[1] - 1)
    return cols


def run_toy1d(config: ExperimentConfig) -> ExperimentReport:
    """Discrete plan vs neural map on one 1D pair, for each gamma in the grid."""
    run = _Run(config)
    p, q = config.source, config.target
    if p.dim != 1:
        raise ConfigError("toy1d needs 1D distributions")
    kernel = cost_mod.kernel_from_dict(config.options.get("kernel", {"type": "DistanceInduced", "alpha": 1.0}))
    gammas = [float(g) for g in config.options.get("gammas", (1.0, 10.0))]
    z_per_x = int(config.options.get("z_per_x", 64))
    xs, ys = _discrete_samples(config)
    std_q = float(ys.std())
    var_q = std_q**2
    profile_rows = []
    for g in gammas:
        tag = f"g{g:g}"
        spec = WeakCostSpec(kernel, g)
        result = _solve(run, spec, xs, ys, f"discrete {tag}")
        d_mean, d_var = conditional_profile(result.plan, ys)
        write_table(run.path(f"fw_trace_{tag}.csv"), ("iter", "objective", "gap", "step"), _fw_trace_rows(result))
        run.metric(f"{tag}.discrete_gap", result.gap)
        run.metric(f"{tag}.discrete_objective", result.objective)

        trained, cfg = _train(run, tag, p, q, spec, None, config.seed)
        if trained is None:
            continue
        grouped = map_samples(trained.T, xs, z_per_x, cfg.latent, derive_seed(config.seed, f"profile-{tag}"))
        outs = grouped.outputs[..., 0]
        n_mean, n_var = outs.mean(axis=1), outs.var(axis=1, ddof=1)

        centre, dm, ds = binned_profile(xs, d_mean, d_var)
        _, nm, ns = binned_profile(xs, n_mean, n_var)
        for c, a, b, s1, s2 in zip(centre, nm, dm, ns, ds):
            profile_rows.append([g, c, a, b, s1, s2])
        mean_gap = float(np.mean(np.abs(nm - dm)))
        std_gap = float(np.mean(np.abs(ns - ds)))
        run.metric(f"{tag}.mean_profile_mad", mean_gap)
        run.metric(f"{tag}.std_profile_mad", std_gap)
        run.metric(f"{tag}.mean_profile_mad_over_std_q", mean_gap / std_q)
        run.metric(f"{tag}.std_profile_mad_over_std_q", std_gap / std_q)
        run.metric(f"{tag}.nearly_match", float(mean_gap <= MEAN_PROFILE_TOL * std_q and std_gap <= STD_PROFILE_TOL * std_q))
        run.metric(f"{tag}.discrete_cvar_over_var_q", float(d_var.mean()) / var_q)
        run.metric(f"{tag}.neural_cvar_over_var_q", float(n_var.mean()) / var_q)
        run.metric(f"{tag}.final_mmd_sq", trained.trace.records[-1]["mmd_sq"])

        cols = _plan_pairs(result.plan, ys, derive_seed(config.seed, f"pairs-{tag}"))
        xy_dot = np.stack([xs[:, 0], ys[cols[:, 0], 0]], axis=1)
        xy_net = np.stack([np.repeat(xs[:, 0], 2), outs[:, :2].reshape(-1)], axis=1)
        write_svg_scatter([Group(xy_dot, "#1f77b4", "discrete plan", 1.4, 0.5),
                           Group(xy_net, "#d62728", "neural plan", 1.2, 0.35)],
                          run.path(f"joint_{tag}.svg"), title=f"(x, y) pairs, gamma={g:g}")
        write_svg_lines([Series(centre, dm, "#1f77b4", "discrete mean"), Series(centre, nm, "#d62728", "neural mean"),
                         Series(centre, ds, "#17becf", "discrete std"), Series(centre, ns, "#ff7f0e", "neural std")],
                        run.path(f"profile_{tag}.svg"), title=f"conditional profile, gamma={g:g}")
    write_table(run.path("profile.csv"),
                ("gamma", "x", "neural_mean", "discrete_mean", "neural_std", "discrete_std"), profile_rows)
    run.metric("std_q", std_q)
    return run.finish()


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def run_experiment(config: ExperimentConfig, only: Optional[str] = None,
                   estimator: Optional[Callable] = None) -> ExperimentReport:
    if config.experiment == "fake_demo":
        return run_fake_demo(config, only)
    if config.experiment == "toy2d":
        return run_toy2d(config)
    if config.experiment == "toy1d":
        return run_toy1d(config)
    if config.experiment == "gamma_sweep":
        return run_gamma_sweep(config)
    if config.experiment == "dwot_solve":
        return run_dwot_solve(config)
    from .checks import run_checks

    return run_checks(config, only=only, estimator=estimator)


def threads_from_env() -> Optional[int]:
    """Thread cap for BLAS-backed reductions from ``WOTLAB_THREADS``."""
    value = os.environ.get("WOTLAB_THREADS")
    if not value:
        return None
    try:
        count = int(value)
    except ValueError as exc:
        raise ConfigError(f"WOTLAB_THREADS must be an integer, got {value!r}") from exc
    if count < 1:
        raise ConfigError("WOTLAB_THREADS must be >= 1")
    return count
