"""Outer algorithms: the plain penalty method, the guardrail algorithm (PGA)
and an increasing-penalty augmented-Lagrangian baseline (IPDD).

All three share :func:`opt_core.inner_solve` and the same stop rule, and all
record a :class:`SolverTrace` for later comparison.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractViolation
from .opt_core import AdamState, GdStopRule, inner_solve
from .problem import (
    AugmentedLagrangian,
    PenaltyFunction,
    PenaltyProblem,
    infeasibility_of,
)

log = logging.getLogger(__name__)

TRACE_COLUMNS = ["wall_time_s", "outer_iter", "inner_iters_cum", "objective", "max_infeasibility", "feasible"]


@dataclass
class TraceRecord:
    wall_time_s: float
    outer_iter: int
    inner_iters_cum: int
    objective: float
    max_infeasibility: float
    feasible: bool
    iterate: np.ndarray
    outer_end: bool = False


@dataclass
class SolverTrace:
    solver_name: str
    config_echo: str = ""
    records: list = field(default_factory=list)
    outer_durations: list = field(default_factory=list)  # seconds per completed outer iteration
    status: str = ""
    note: str = ""

    def outer_end_records(self):
        return [r for r in self.records if r.outer_end]

    def first_feasible_time(self) -> Optional[float]:
        for r in self.records:
            if r.feasible:
                return r.wall_time_s
        return None


class GuardrailState(NamedTuple):
    epsilon: np.ndarray
    outer_k: int


@dataclass
class IpddState:
    dual: np.ndarray
    rho: float
    rho_growth: float = 2.0
    rho_max: float = 1e8
    violation_shrink: float = 0.9

    def __post_init__(self):
        if self.rho <= 0 or self.rho_growth <= 1 or not 0 < self.violation_shrink < 1:
            raise ContractViolation("IPDD needs rho > 0, rho_growth > 1, 0 < violation_shrink < 1")
        self.rho = min(self.rho, self.rho_max)


class SolverResult(NamedTuple):
    best_feasible: Optional[np.ndarray]
    last: np.ndarray
    trace: SolverTrace


class _Recorder:
    """Appends trace records and tracks the best feasible point."""

    def __init__(self, problem: PenaltyProblem, trace: SolverTrace, t0: float):
        self.problem = problem
        self.trace = trace
        self.t0 = t0
        self.best = None
        self.best_J = math.inf

    def __call__(self, u, outer_iter, inner_cum, outer_end=False):
        p = self.problem
        r = p.residuals(u)
        inf = infeasibility_of(r, p.feas_tol)
        J = p.objective(u)
        feasible = inf.worst_index < 0
        self.trace.records.append(TraceRecord(
            time.monotonic() - self.t0, outer_iter, inner_cum, J,
            # y-axis of the infeasibility plots: largest violated |f_i - q_i|
            infeasibility_of(r).gamma_max_abs, feasible, np.array(u, dtype=float), outer_end,
        ))
        if feasible and J < self.best_J:
            self.best_J = J
            self.best = np.array(u, dtype=float)
        return r


def guardrail_update(state: GuardrailState, gamma) -> GuardrailState:
    """``eps_i <- max(0, eps_i - gamma_i / k)`` with ``k`` the new outer count."""
    k = state.outer_k + 1
    return GuardrailState(np.maximum(0.0, state.epsilon - np.asarray(gamma, dtype=float) / k), k)


def dual_update(state: IpddState, h, prev_worst: float = math.inf) -> IpddState:
    """``lam <- lam + 2 rho h``; ``rho`` grows when ``max|h|`` failed to shrink enough."""
    h = np.asarray(h, dtype=float)
    worst = float(np.max(np.abs(h)))
    rho = state.rho
    if worst > state.violation_shrink * prev_worst:
        rho = min(state.rho_max, state.rho_growth * rho)
    return replace(state, dual=state.dual + 2.0 * state.rho * h, rho=rho)


def _check_start(problem, start):
    start = np.asarray(start, dtype=float)
    if start.shape != (problem.dim,):
        raise ContractViolation(f"start has shape {start.shape}, expected ({problem.dim},)")
    if not problem.feasible_set.contains(start, tol=1e-9):
        raise ContractViolation("start lies outside the feasible set")
    return start


def penalty_method(problem: PenaltyProblem, C: float, start, adam: Optional[AdamState] = None,
                   stop: Optional[GdStopRule] = None, *, time_limit_s: Optional[float] = None,
                   checkpoint_every: int = 500):
    """One penalty minimisation with no guardrail. Returns ``(solution, trace)``."""
    start = _check_start(problem, start)
    t0 = time.monotonic()
    trace = SolverTrace("pm", config_echo=json.dumps({"C": C}))
    rec = _Recorder(problem, trace, t0)
    rec(start, 0, 0)
    fn = PenaltyFunction(problem, C)
    deadline = None if time_limit_s is None else t0 + time_limit_s
    res = inner_solve(fn, problem.feasible_set, start, adam, stop, deadline=deadline,
                      checkpoint=lambda x, j: rec(x, 0, j), checkpoint_every=checkpoint_every)
    rec(res.x, 1, res.iterations, outer_end=True)
    trace.status = res.status
    if res.status == "converged":
        trace.outer_durations.append(trace.records[-1].wall_time_s - trace.records[0].wall_time_s)
    return res.x, trace


def pga(problem: PenaltyProblem, C: float, start, adam: Optional[AdamState] = None,
        stop: Optional[GdStopRule] = None, time_limit_s: float = 60.0, *,
        max_outer: Optional[int] = None, checkpoint_every: int = 500,
        on_outer=None) -> SolverResult:
    """Penalty-based guardrail algorithm.

    Each outer iteration minimises ``J + C sum (f_i - q_i - eps_i)^2`` from the
    previous iterate, then updates ``eps_i <- max(0, eps_i - gamma_i / k)`` with
    ``gamma_i = f_i - q_i``. Runs until ``time_limit_s`` (or ``max_outer``).
    ``on_outer(u, state)`` is called after every guardrail update.
    """
    if time_limit_s <= 0:
        raise ContractViolation("time_limit_s must be positive")
    start = _check_start(problem, start)
    t0 = time.monotonic()
    deadline = t0 + time_limit_s
    trace = SolverTrace("pga", config_echo=json.dumps({"C": C, "time_limit_s": time_limit_s}))
    rec = _Recorder(problem, trace, t0)
    rec(start, 0, 0)
    t_prev = trace.records[-1].wall_time_s
    state = GuardrailState(np.zeros(problem.horizon), 0)
    u = start
    inner_cum = 0
    status = "time_limit"
    while True:
        fn = PenaltyFunction(problem, C, state.epsilon)
        base = inner_cum
        res = inner_solve(fn, problem.feasible_set, u, adam, stop, deadline=deadline,
                          checkpoint=lambda x, j: rec(x, state.outer_k, base + j),
                          checkpoint_every=checkpoint_every)
        u = res.x
        inner_cum += res.iterations
        gamma = rec(u, state.outer_k + 1, inner_cum, outer_end=True)
        state = guardrail_update(state, gamma)
        k = state.outer_k
        if on_outer is not None:
            on_outer(u, state)
        t_end = trace.records[-1].wall_time_s
        if res.status != "deadline":
            trace.outer_durations.append(t_end - t_prev)
        t_prev = t_end
        if time.monotonic() >= deadline:
            break
        if max_outer is not None and k >= max_outer:
            status = "max_outer"
            break
    trace.status = status
    if rec.best is None:
        trace.note = "no feasible iterate found within the budget"
    return SolverResult(rec.best, u, trace)


def ipdd(problem: PenaltyProblem, state0: IpddState, start, adam: Optional[AdamState] = None,
         stop: Optional[GdStopRule] = None, time_limit_s: float = 60.0, *,
         max_outer: Optional[int] = None, checkpoint_every: int = 500,
         on_outer=None) -> SolverResult:
    """Augmented-Lagrangian baseline with an increasing penalty.

    Outer step: minimise ``J + lam.h + rho |h|^2`` (``h = f - q``), check
    feasibility, set ``lam <- lam + 2 rho h``, and multiply ``rho`` by
    ``rho_growth`` whenever ``max|h|`` did not shrink by ``violation_shrink``.
    """
    if time_limit_s <= 0:
        raise ContractViolation("time_limit_s must be positive")
    start = _check_start(problem, start)
    t0 = time.monotonic()
    deadline = t0 + time_limit_s
    trace = SolverTrace("ipdd", config_echo=json.dumps({
        "rho0": state0.rho, "rho_growth": state0.rho_growth, "rho_max": state0.rho_max,
        "violation_shrink": state0.violation_shrink, "time_limit_s": time_limit_s}))
    rec = _Recorder(problem, trace, t0)
    rec(start, 0, 0)
    t_prev = trace.records[-1].wall_time_s
    dual = np.array(state0.dual, dtype=float)
    if dual.shape != (problem.horizon,):
        raise ContractViolation("dual vector must have length T")
    rho = state0.rho
    prev_worst = math.inf
    u = start
    inner_cum = 0
    k = 0
    status = "time_limit"
    while True:
        fn = AugmentedLagrangian(problem, dual, rho)
        base, k_now = inner_cum, k
        res = inner_solve(fn, problem.feasible_set, u, adam, stop, deadline=deadline,
                          checkpoint=lambda x, j: rec(x, k_now, base + j),
                          checkpoint_every=checkpoint_every)
        u = res.x
        inner_cum += res.iterations
        k += 1
        h = rec(u, k, inner_cum, outer_end=True)
        new = dual_update(replace(state0, dual=dual, rho=rho), h, prev_worst)
        dual, rho = new.dual, new.rho
        prev_worst = float(np.max(np.abs(h)))
        if on_outer is not None:
            on_outer(u, new)
        t_end = trace.records[-1].wall_time_s
        if res.status != "deadline":
            trace.outer_durations.append(t_end - t_prev)
        t_prev = t_end
        if time.monotonic() >= deadline:
            break
        if max_outer is not None and k >= max_outer:
            status = "max_outer"
            break
    trace.status = status
    if rec.best is None:
        trace.note = "no feasible iterate found within the budget"
    return SolverResult(rec.best, u, trace)


# --------------------------------------------------------------------------
# Property checks

@dataclass
class PropertyReport:
    passed: bool
    n_checked: int
    violations: list = field(default_factory=list)
    detail: dict = field(default_factory=dict)


def verify_proposition_1(problem: PenaltyProblem, sample_count: int, rng=None, C: float = 1.0,
                         sampler=None, tol: float = 1e-8) -> PropertyReport:
    """Sign check: at points with every ``f_i - q_i >= 0`` the penalty gradient is non-negative."""
    rng = np.random.default_rng(0) if rng is None else rng
    sampler = sampler or problem.sample_feasible
    fn = PenaltyFunction(problem, C)
    violations = []
    checked = 0
    for _ in range(sample_count):
        u = sampler(rng)
        if np.any(problem.residuals(u) < 0):
            continue
        checked += 1
        _, g = fn(u)
        bad = np.flatnonzero(g < -tol)
        if bad.size:
            violations.append({"point": u.tolist(), "coords": bad.tolist(), "grad": g[bad].tolist()})
    return PropertyReport(not violations and checked > 0, checked, violations)


def projected_gradient(fn, feasible_set, u, step: float = 1e-4) -> np.ndarray:
    """``(u - P(u - step * grad)) / step``; equals the gradient away from the boundary."""
    _, g = fn(u)
    return (u - feasible_set.project(u - step * g)) / step


def verify_proposition_3(problem: PenaltyProblem, C: float, minimum_point, epsilon_new,
                         tol: Optional[float] = None, tol_factor: float = 10.0,
                         epsilon_old=None) -> PropertyReport:
    """First projected-gradient step on the shifted penalty does not decrease any coordinate.

    ``tol`` defaults to ``tol_factor`` times the max-norm of the projected
    gradient of the penalty that ``minimum_point`` minimised (guardrail
    ``epsilon_old``, zero by default), i.e. how stationary the inner solve
    actually got.
    """
    u = np.asarray(minimum_point, dtype=float)
    fs = problem.feasible_set
    base = projected_gradient(PenaltyFunction(problem, C, epsilon_old), fs, u)
    achieved = float(np.max(np.abs(base)))
    if tol is None:
        tol = tol_factor * achieved + 1e-12
    shifted = projected_gradient(PenaltyFunction(problem, C, epsilon_new), fs, u)
    bad = np.flatnonzero(shifted > tol)
    return PropertyReport(bad.size == 0, u.size,
                          [{"coord": int(i), "value": float(shifted[i])} for i in bad],
                          {"tol": tol, "achieved_grad_norm": achieved, "shifted_grad": shifted.tolist()})


# --------------------------------------------------------------------------
# Persistence

def write_trace(trace: SolverTrace, out_dir, stem: Optional[str] = None, config: Optional[dict] = None):
    """Write ``<stem>.csv``, ``<stem>_iterates.csv`` and ``<stem>_config.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or trace.solver_name
    paths = [out / f"{stem}.csv", out / f"{stem}_iterates.csv", out / f"{stem}_config.json"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace.records:
            w.writerow([f"{r.wall_time_s:.6f}", r.outer_iter, r.inner_iters_cum,
                        repr(float(r.objective)), repr(float(r.max_infeasibility)), int(r.feasible)])
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh)
        n = trace.records[0].iterate.size if trace.records else 0
        w.writerow(["outer_iter", "inner_iters_cum"] + [f"u{i}" for i in range(n)])
        for r in trace.records:
            w.writerow([r.outer_iter, r.inner_iters_cum] + [repr(float(v)) for v in r.iterate])
    echo = {"solver": trace.solver_name, "solver_params": json.loads(trace.config_echo or "{}"),
            "status": trace.status, "note": trace.note,
            "completed_outer_iterations": len(trace.outer_durations)}
    if config is not None:
        echo["config"] = config
    paths[2].write_text(json.dumps(echo, indent=2, sort_keys=True, default=str))
    return paths


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["wall_time_s"] = float(r["wall_time_s"])
        r["outer_iter"] = int(r["outer_iter"])
        r["inner_iters_cum"] = int(r["inner_iters_cum"])
        r["objective"] = float(r["objective"])
        r["max_infeasibility"] = float(r["max_infeasibility"])
        r["feasible"] = bool(int(r["feasible"]))
    return rows
