"""Experiment orchestration: configs, solver comparisons, studies and summaries.

Config files are YAML with nested sections; every key is optional and an
empty file reproduces the default setup of the chosen domain. Unknown keys
are rejected.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import ndim
from .dhs.physics import DhsParams, Dataset, generate_dataset, load_demand, scale_demand, synthetic_demand
from .dhs.simplified import SimplifiedDhsProblem
from .errors import ConfigError, ContractViolation, NumericalFailure
from .opt_core import AdamState, GdStopRule, central_differences, relative_error
from .problem import PenaltyFunction, PenaltyProblem, max_infeasibility
from .solvers import IpddState, ipdd, penalty_method, pga, read_trace_csv, write_trace

log = logging.getLogger(__name__)

DOMAINS = ("ndim", "dhs_simplified", "dhs_surrogate")
SOLVERS = ("pm", "pga", "ipdd")

DOMAIN_DEFAULTS = {
    "ndim": {"C": 0.05, "window_n": 50, "delta": 1e-6, "time_limit_s": 60.0},
    "dhs_simplified": {"C": 100.0, "window_n": 1000, "delta": 0.1, "time_limit_s": 300.0},
    "dhs_surrogate": {"C": 100.0, "window_n": 1000, "delta": 0.1, "time_limit_s": 300.0},
}
DEFAULT_INIT_HEAT = {"dhs_simplified": (60.0, 70.0), "dhs_surrogate": (30.0, 70.0)}
DEFAULT_SEASON = {"dhs_simplified": "winter", "dhs_surrogate": "spring"}


# --------------------------------------------------------------------------
# Config

@dataclass
class StopConfig:
    window_n: Optional[int] = None
    delta: Optional[float] = None
    mode: str = "span"
    max_inner_iters: int = 200_000


@dataclass
class AdamConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8


@dataclass
class IpddConfig:
    rho0: Optional[float] = None  # defaults to C
    rho_growth: float = 2.0
    rho_max: float = 1e8
    violation_shrink: float = 0.9


@dataclass
class InitConfig:
    mode: Optional[str] = None  # sample | explicit | file
    points: list = field(default_factory=list)
    file: Optional[str] = None
    heat_range: Optional[list] = None


@dataclass
class DemandConfig:
    source: str = "synthetic"  # synthetic | file
    file: Optional[str] = None
    season: Optional[str] = None
    horizon: int = 12
    peak: Optional[float] = None
    seed: int = 1


@dataclass
class SurrogateConfig:
    model_dir: Optional[str] = None
    dataset: Optional[str] = None
    n_episodes: int = 834
    n_w: int = 11
    batch_size: int = 128
    g_max_epochs: int = 3000
    g_min_delta: float = 1e-6
    g_patience: int = 200
    f_max_epochs: int = 1000
    f_min_delta: float = 5e-6
    f_patience: int = 35
    paper_strict_masks: bool = False


@dataclass
class StudyConfig:
    n_inits: int = 20
    time_limit_s: Optional[float] = None
    max_outer: Optional[int] = None
    C_values: list = field(default_factory=list)
    n_points: int = 100
    fd_step: float = 1e-5


@dataclass
class ExperimentConfig:
    domain: str = "ndim"
    solvers: list = field(default_factory=lambda: list(SOLVERS))
    C: Optional[float] = None
    time_limit_s: Optional[float] = None
    max_outer: Optional[int] = None
    seed: int = 0
    out: str = "runs/latest"
    checkpoint_every: int = 500
    stop: StopConfig = field(default_factory=StopConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    ipdd: IpddConfig = field(default_factory=IpddConfig)
    init: InitConfig = field(default_factory=InitConfig)
    demand: DemandConfig = field(default_factory=DemandConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    study: StudyConfig = field(default_factory=StudyConfig)

    # -- resolved values -------------------------------------------------
    @property
    def penalty_C(self) -> float:
        return float(self.C if self.C is not None else DOMAIN_DEFAULTS[self.domain]["C"])

    @property
    def budget(self) -> float:
        return float(self.time_limit_s if self.time_limit_s is not None
                     else DOMAIN_DEFAULTS[self.domain]["time_limit_s"])

    def stop_rule(self) -> GdStopRule:
        d = DOMAIN_DEFAULTS[self.domain]
        return GdStopRule(self.stop.window_n or d["window_n"], self.stop.delta or d["delta"],
                          self.stop.max_inner_iters, self.stop.mode)

    def adam_state(self, n: int) -> AdamState:
        a = self.adam
        return AdamState.fresh(n, a.learning_rate, beta1=a.beta1, beta2=a.beta2, eps_stab=a.eps_stab)

    def ipdd_state(self, horizon: int) -> IpddState:
        rho0 = self.ipdd.rho0 if self.ipdd.rho0 is not None else self.penalty_C
        return IpddState(np.zeros(horizon), rho0, self.ipdd.rho_growth, self.ipdd.rho_max,
                         self.ipdd.violation_shrink)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        bad = [s for s in self.solvers if s not in SOLVERS]
        if bad or not self.solvers:
            raise ConfigError(f"solvers must be a non-empty subset of {SOLVERS}, got {self.solvers}")
        if self.penalty_C <= 0 or self.budget <= 0:
            raise ConfigError("C and time_limit_s must be positive")
        try:
            self.stop_rule()
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from exc
        if self.init.mode not in (None, "sample", "explicit", "file"):
            raise ConfigError(f"unknown init mode {self.init.mode!r}")
        if self.init.mode == "file" and not (self.init.file and Path(self.init.file).is_file()):
            raise ConfigError(f"init file not found: {self.init.file}")
        if self.init.mode == "explicit" and not self.init.points and self.domain != "ndim":
            raise ConfigError("explicit init mode needs init.points")
        if self.demand.source not in ("synthetic", "file"):
            raise ConfigError(f"unknown demand source {self.demand.source!r}")
        if self.demand.source == "file" and not (self.demand.file and Path(self.demand.file).is_file()):
            raise ConfigError(f"demand file not found: {self.demand.file}")
        season = self.demand.season
        if season is not None and season not in ("winter", "spring"):
            raise ConfigError(f"unknown season {season!r}")
        if self.surrogate.dataset and not Path(self.surrogate.dataset).is_file():
            raise ConfigError(f"dataset not found: {self.surrogate.dataset}")
        return self


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {sorted(unknown)}")
    kw = {}
    for name, value in data.items():
        f = known[name]
        sub = f.default_factory
        if sub is not dataclasses.MISSING and dataclasses.is_dataclass(sub):
            kw[name] = _build(sub, value, f"{where}.{name}")
        else:
            kw[name] = value
    return cls(**kw)


def config_from_dict(data: Optional[dict]) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "config").validate()


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a YAML config and apply top-level overrides (``None`` values are ignored)."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    return config_from_dict(data)


# --------------------------------------------------------------------------
# Problem construction

def make_demand(cfg: ExperimentConfig) -> np.ndarray:
    season = cfg.demand.season or DEFAULT_SEASON.get(cfg.domain, "winter")
    if cfg.demand.source == "file":
        d = load_demand(cfg.demand.file)
        return scale_demand(d, cfg.demand.peak) if cfg.demand.peak else d
    d = synthetic_demand(np.random.default_rng(cfg.demand.seed), cfg.demand.horizon, season)
    return scale_demand(d, cfg.demand.peak) if cfg.demand.peak else d


def build_problem(cfg: ExperimentConfig) -> PenaltyProblem:
    if cfg.domain == "ndim":
        return ndim.NdimProblem()
    params = DhsParams()
    demand = make_demand(cfg)
    if cfg.domain == "dhs_simplified":
        return SimplifiedDhsProblem(demand, params)
    from .monotone import Surrogate, SurrogateProblem
    if not cfg.surrogate.model_dir or not Path(cfg.surrogate.model_dir).is_dir():
        raise ConfigError("dhs_surrogate needs surrogate.model_dir pointing at trained networks "
                          "(see the train-surrogate command)")
    return SurrogateProblem(Surrogate.load(cfg.surrogate.model_dir), demand, params)


def sample_init(cfg: ExperimentConfig, problem: PenaltyProblem, rng) -> np.ndarray:
    if cfg.domain == "ndim":
        return problem.sample_feasible(rng)
    lo, hi = cfg.init.heat_range or DEFAULT_INIT_HEAT[cfg.domain]
    return problem.sample_feasible(rng, lo, hi)


def initial_points(cfg: ExperimentConfig, problem: PenaltyProblem, n: int) -> list:
    """``n`` feasible starting points according to the init section."""
    mode = cfg.init.mode or ("explicit" if cfg.domain == "ndim" else "sample")
    if mode == "explicit":
        pts = cfg.init.points or (ndim.REFERENCE_INITS if cfg.domain == "ndim" else [])
        pts = [np.asarray(p, dtype=float).ravel() for p in pts]
    elif mode == "file":
        arr = np.loadtxt(cfg.init.file, delimiter="," if str(cfg.init.file).endswith(".csv") else None, ndmin=2)
        pts = list(arr)
    else:
        rng = np.random.default_rng(cfg.seed)
        return [sample_init(cfg, problem, rng) for _ in range(n)]
    if len(pts) < n:
        rng = np.random.default_rng(cfg.seed)
        pts = pts + [sample_init(cfg, problem, rng) for _ in range(n - len(pts))]
    for p in pts[:n]:
        if p.shape != (problem.dim,):
            raise ConfigError(f"init point has {p.size} entries, expected {problem.dim}")
    return pts[:n]


# --------------------------------------------------------------------------
# Summaries

SUMMARY_COLUMNS = ["solver", "status", "best_feasible_objective", "time_to_first_feasible_s",
                   "outer_iterations", "outer_time_mean_s", "outer_time_std_s", "final_max_infeasibility",
                   "error"]


def summarize_rows(name: str, rows: list, completed: int, status: str = "", error: str = "") -> dict:
    """Comparison statistics recomputed from trace rows.

    Outer-iteration times are differences between consecutive outer-end
    records (the first record of each ``outer_iter`` value); only the first
    ``completed`` iterations count. The starting point (first row) is never
    counted as found.
    """
    ends, seen = [], set()
    for r in rows:
        if r["outer_iter"] not in seen:
            seen.add(r["outer_iter"])
            ends.append(r)
    times = np.diff([r["wall_time_s"] for r in ends])[:completed]
    feas = [r["objective"] for r in rows[1:] if r["feasible"]]
    first = next((r["wall_time_s"] for r in rows[1:] if r["feasible"]), None)
    return {
        "solver": name,
        "status": status,
        "best_feasible_objective": min(feas) if feas else None,
        "time_to_first_feasible_s": first,
        "outer_iterations": len(times),
        "outer_time_mean_s": float(np.mean(times)) if len(times) else None,
        "outer_time_std_s": float(np.std(times)) if len(times) else None,
        "final_max_infeasibility": ends[-1]["max_infeasibility"] if ends else None,
        "error": error,
    }


def summarize_trace_file(csv_path) -> dict:
    csv_path = Path(csv_path)
    side = json.loads(csv_path.with_name(csv_path.stem + "_config.json").read_text())
    return summarize_rows(side["solver"], read_trace_csv(csv_path), side["completed_outer_iterations"],
                          side.get("status", ""))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_summary(rows: list, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in SUMMARY_COLUMNS])


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ComparisonSummary:
    rows: list
    start: np.ndarray
    out_dir: Path
    oracle_J: Optional[float] = None

    def row(self, solver: str) -> dict:
        return next(r for r in self.rows if r["solver"] == solver)


# --------------------------------------------------------------------------
# Operations

def _solve(cfg: ExperimentConfig, problem: PenaltyProblem, solver: str, start, time_limit: float,
           max_outer: Optional[int] = None):
    """Run one solver; returns ``(best_feasible_or_None, last, trace)``."""
    adam, stop = cfg.adam_state(problem.dim), cfg.stop_rule()
    if solver == "pm":
        x, trace = penalty_method(problem, cfg.penalty_C, start, adam, stop, time_limit_s=time_limit,
                                  checkpoint_every=cfg.checkpoint_every)
        return (x if problem.is_feasible(x) else None), x, trace
    if solver == "pga":
        r = pga(problem, cfg.penalty_C, start, adam, stop, time_limit, max_outer=max_outer,
                checkpoint_every=cfg.checkpoint_every)
    else:
        r = ipdd(problem, cfg.ipdd_state(problem.horizon), start, adam, stop, time_limit,
                 max_outer=max_outer, checkpoint_every=cfg.checkpoint_every)
    return r.best_feasible, r.last, r.trace


def run(cfg: ExperimentConfig) -> ComparisonSummary:
    """Every configured solver from the same start; traces plus ``summary.csv`` in ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    start = initial_points(cfg, problem, 1)[0]
    rows = []
    for solver in cfg.solvers:
        log.info("%s on %s for %.0f s", solver, cfg.domain, cfg.budget)
        try:
            _, _, trace = _solve(cfg, problem, solver, start, cfg.budget, cfg.max_outer)
        except NumericalFailure as exc:
            rows.append({"solver": solver, "status": "numerical_failure", "error": str(exc)})
            continue
        csv_path = write_trace(trace, out, solver, cfg.to_dict())[0]
        rows.append(summarize_trace_file(csv_path))
    oracle_J = None
    if cfg.domain == "ndim":
        lo, hi = problem.feasible_set.bounds()
        res = ndim.oracle_optimum(lo, hi)
        if res is not None:
            oracle_J = res.J
            rows.append({"solver": "oracle", "status": "grid", "best_feasible_objective": res.J,
                         "final_max_infeasibility": 0.0})
    write_summary(rows, out / "summary.csv")
    return ComparisonSummary(rows, start, out, oracle_J)


@dataclass
class TractabilityResult:
    distance: float
    threshold: float
    passed: bool
    solutions: list
    objectives: list
    initial_objectives: list
    raw_max_distance: float
    feasible_count: int


def tractability_study(cfg: ExperimentConfig, n_inits: Optional[int] = None) -> TractabilityResult:
    """PGA from several feasible starts; compares the spread of the answers with the box size.

    ``distance`` is the largest pairwise Euclidean distance between the
    returned solutions divided by the lowest initial objective; ``threshold``
    is ``0.01 * |u_max - u_min|`` of the feasible set's bounding box divided
    by the lowest feasible objective found.
    """
    n = cfg.study.n_inits if n_inits is None else n_inits
    if n < 1:
        raise ConfigError("n_inits must be >= 1")
    problem = build_problem(cfg)
    starts = initial_points(cfg, problem, n)
    limit = cfg.study.time_limit_s or cfg.budget
    max_outer = cfg.study.max_outer if cfg.study.max_outer is not None else cfg.max_outer
    sols, objs, feas_objs = [], [], []
    for i, u0 in enumerate(starts):
        best, last, _ = _solve(cfg, problem, "pga", u0, limit, max_outer)
        sol = best if best is not None else last
        sols.append(sol)
        objs.append(problem.objective(sol))
        if best is not None:
            feas_objs.append(objs[-1])
        log.info("init %d/%d: J=%.6g feasible=%s", i + 1, n, objs[-1], best is not None)
    init_objs = [problem.objective(u) for u in starts]
    S = np.array(sols)
    raw = float(np.max(np.linalg.norm(S[:, None, :] - S[None, :, :], axis=-1))) if n > 1 else 0.0
    lo, hi = problem.feasible_set.bounds()
    ref = min(feas_objs) if feas_objs else min(objs)
    distance = raw / min(init_objs)
    threshold = 0.01 * float(np.linalg.norm(hi - lo)) / ref
    passed = distance < threshold and len(feas_objs) == n
    return TractabilityResult(distance, threshold, passed, sols, objs, init_objs, raw, len(feas_objs))


SWEEP_COLUMNS = ["C", "objective", "signed_worst", "max_infeasibility", "worst_index", "inner_iterations", "status"]


def sweep_C(cfg: ExperimentConfig, C_values=None, out_path=None) -> list[dict]:
    """One penalty-method solve per C from a common start; records J and the signed worst violation."""
    values = list(C_values if C_values is not None else cfg.study.C_values)
    if len(values) < 2:
        raise ConfigError("sweep needs at least two values of C")
    if any(float(c) <= 0 for c in values):
        raise ConfigError("C values must be positive")
    problem = build_problem(cfg)
    start = initial_points(cfg, problem, 1)[0]
    rows = []
    for C in values:
        x, trace = penalty_method(problem, float(C), start, cfg.adam_state(problem.dim), cfg.stop_rule(),
                                  time_limit_s=cfg.budget)
        inf = max_infeasibility(problem, x, tol=0.0)
        rows.append({"C": float(C), "objective": problem.objective(x), "signed_worst": inf.signed_worst,
                     "max_infeasibility": inf.gamma_max_abs, "worst_index": inf.worst_index,
                     "inner_iterations": trace.records[-1].inner_iters_cum, "status": trace.status})
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, SWEEP_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows


@dataclass
class GradientReport:
    max_rel_error: float
    worst_point: Optional[np.ndarray]
    n_points: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def validate_gradients(cfg: ExperimentConfig, n_points: Optional[int] = None,
                       fd_step: Optional[float] = None) -> GradientReport:
    """Penalty gradient and constraint Jacobian against central differences at random feasible points.

    Domains with delay-dependent constraints are differentiated with the
    delay quantities frozen at the evaluation point, and so is the FD oracle.
    """
    n = n_points or cfg.study.n_points
    h = fd_step or cfg.study.fd_step
    problem = build_problem(cfg)
    rng = np.random.default_rng(cfg.seed)
    worst, worst_u = 0.0, None
    for _ in range(n):
        u = sample_init(cfg, problem, rng)
        frozen = problem.frozen_at(u)
        fn = PenaltyFunction(frozen, cfg.penalty_C)
        _, g = fn(u)
        err = relative_error(g, central_differences(lambda v: fn(v)[0], u, h))
        _, jac = frozen.constraints_and_jac(u)
        fd = central_differences(frozen.constraints, u, h)
        for i in range(problem.horizon):
            err = max(err, relative_error(jac[i], fd[i]))
        if err > worst:
            worst, worst_u = err, u
    tol = 1e-3 if cfg.domain == "dhs_surrogate" else 1e-4
    return GradientReport(worst, worst_u, n, tol)


def gen_data(cfg: ExperimentConfig, out_path=None) -> Path:
    """Simulate training episodes and write the dataset CSV."""
    ds = generate_dataset(DhsParams(), n_episodes=cfg.surrogate.n_episodes, seed=cfg.seed, n_w=cfg.surrogate.n_w)
    path = Path(out_path or Path(cfg.out) / "dataset.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.to_csv(path)
    return path


def train_surrogate(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Train both networks; writes model files and ``training_report.json``."""
    from .monotone import Surrogate, TrainConfig, one_step_rmse, train
    s = cfg.surrogate
    if s.dataset:
        ds = Dataset.from_csv(s.dataset, seed=cfg.seed)
    else:
        ds = generate_dataset(DhsParams(), n_episodes=s.n_episodes, seed=cfg.seed, n_w=s.n_w)
    out = Path(out_dir or s.model_dir or Path(cfg.out) / "surrogate")
    t0 = time.monotonic()
    g_cfg = TrainConfig(max_epochs=s.g_max_epochs, min_delta=s.g_min_delta, patience=s.g_patience,
                        batch_size=s.batch_size, seed=cfg.seed)
    f_cfg = TrainConfig(max_epochs=s.f_max_epochs, min_delta=s.f_min_delta, patience=s.f_patience,
                        batch_size=s.batch_size, seed=cfg.seed)
    g, g_hist = train(ds, g_cfg, "g", s.paper_strict_masks)
    f, f_hist = train(ds, f_cfg, "f", s.paper_strict_masks)
    Surrogate(g, f, ds.n_w).save(out)
    report = {
        "rows": int(len(ds.data)),
        "g_epochs": len(g_hist.test_loss), "f_epochs": len(f_hist.test_loss),
        "g_stopped_early": g_hist.stopped_early, "f_stopped_early": f_hist.stopped_early,
        "g_rmse": dict(zip(("tin", "tout", "mdot"), one_step_rmse(g, ds, "g").tolist())),
        "f_rmse": float(one_step_rmse(f, ds, "f")[0]),
        "train_seconds": time.monotonic() - t0,
        "g_test_loss": g_hist.test_loss, "f_test_loss": f_hist.test_loss,
    }
    (out / "training_report.json").write_text(json.dumps(report, indent=2))
    return report
