"""Node-method model of a single-pipe district heating system.

A CHP plant heats water to a supply temperature; the water travels along a
supply pipe of fixed volume, so the outlet temperature is a flow-weighted
mix of earlier inlet temperatures, cooled toward ambient on the way.

Units at the API boundary: MW, degC, kg/s, hours. Internally SI (J, kg, s).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from ..errors import ContractViolation, DataFormatError, InsufficientHistory, InvalidTemperature
from ..opt_core import ConvexPolygon

MW = 1e6
CHP_VERTICES = ((0.0, 10.0), (10.0, 5.0), (70.0, 35.0), (0.0, 50.0))


@dataclass(frozen=True)
class DhsParams:
    chp_vertices: tuple = CHP_VERTICES
    horizon: int = 12
    a0: float = 8.1817  # cost per MWh of heat
    a1: float = 38.1805  # cost per MWh of power
    dt_hours: float = 1.0
    length_m: float = 4000.0
    area_m2: float = 1.1
    heat_capacity: float = 4181.3  # J/(kg degC)
    heat_transfer: float = 0.735  # W/(m degC)
    density: float = 963.0  # kg/m3
    tau_ambient: float = 0.0
    tau_return: float = 0.0
    tau_supply: float = 90.0  # fixed supply inlet temperature
    min_flow: float = 5.0
    max_flow: float = 810.0
    min_supply_temp: float = 70.0
    max_supply_temp: float = 120.0

    def __post_init__(self):
        for name in ("dt_hours", "length_m", "area_m2", "heat_capacity", "density", "min_flow", "max_flow"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.heat_transfer < 0:
            raise ContractViolation("heat_transfer must be non-negative")
        if self.min_flow > self.max_flow:
            raise ContractViolation("min_flow > max_flow")
        ConvexPolygon(self.chp_vertices)

    @property
    def dt(self) -> float:
        """Step length in seconds."""
        return 3600.0 * self.dt_hours

    @property
    def pipe_mass(self) -> float:
        """Water mass held by the pipe (rho * A * L), kg."""
        return self.density * self.area_m2 * self.length_m

    @property
    def loss_rate(self) -> float:
        """``lambda * dt / (A rho c)``, the per-step heat-loss exponent scale."""
        return self.heat_transfer * self.dt / (self.area_m2 * self.density * self.heat_capacity)

    @property
    def history_length(self) -> int:
        """Steps of history that cover the longest possible delay."""
        return math.ceil(self.pipe_mass / (self.min_flow * self.dt)) + 1

    @property
    def polygon(self) -> ConvexPolygon:
        return ConvexPolygon(self.chp_vertices)


class SimState(NamedTuple):
    inlet_temp: float
    outlet_temp: float
    mass_flow: float


@dataclass
class PipeHistory:
    """Inlet temperatures and mass flows of the supply pipe, oldest first."""

    inlet_temps: list = field(default_factory=list)
    mass_flows: list = field(default_factory=list)

    def append(self, inlet_temp: float, mass_flow: float):
        self.inlet_temps.append(float(inlet_temp))
        self.mass_flows.append(float(mass_flow))

    def __len__(self):
        return len(self.mass_flows)

    @classmethod
    def steady(cls, n_steps: int, inlet_temp: float, mass_flow: float) -> "PipeHistory":
        return cls([float(inlet_temp)] * n_steps, [float(mass_flow)] * n_steps)


# --------------------------------------------------------------------------
# Node method, vectorised over time steps

class NodeMethod(NamedTuple):
    gamma: np.ndarray  # int
    n_w: np.ndarray  # int
    R: np.ndarray  # kg
    S: np.ndarray  # kg
    outlet_no_loss: np.ndarray  # degC
    loss_factor: np.ndarray
    outlet: np.ndarray  # degC
    # coefficient groups of the mixing formula (kg), for conservation checks
    coef_first: np.ndarray
    coef_middle: np.ndarray
    coef_last: np.ndarray


def _delays(cum, steps, pipe_mass):
    """Integer delays for absolute step indices ``steps`` given cumulative masses.

    ``cum[j]`` is the mass that entered before step ``j`` (``cum[0] = 0``).
    """
    j_gamma = np.searchsorted(cum, cum[steps + 1] - pipe_mass, side="right") - 1
    j_nw = np.searchsorted(cum, cum[steps] - pipe_mass, side="right") - 1
    if np.any(j_gamma < 0) or np.any(j_nw < 0):
        raise InsufficientHistory("history too short for the water in the pipe to be traced back")
    return steps - j_gamma, steps - j_nw


def node_method(mass_flows, inlet_temps, params: DhsParams, steps=None, tau_ambient=None) -> NodeMethod:
    """Outlet temperatures at absolute indices ``steps`` (default: the last one)."""
    flows = np.asarray(mass_flows, dtype=float)
    temps = np.asarray(inlet_temps, dtype=float)
    if flows.shape != temps.shape:
        raise ContractViolation("flows and temperatures differ in length")
    if np.any(flows <= 0):
        raise ContractViolation("mass flows must be positive")
    steps = np.atleast_1d(len(flows) - 1 if steps is None else np.asarray(steps, dtype=int))
    dt = params.dt
    M = params.pipe_mass
    m = flows * dt
    cum = np.concatenate(([0.0], np.cumsum(m)))
    heat_cum = np.concatenate(([0.0], np.cumsum(m * temps)))
    gamma, n_w = _delays(cum, steps, M)
    R = cum[steps + 1] - cum[steps - gamma]
    S = np.where(n_w >= gamma + 1, cum[steps + 1] - cum[steps - n_w + 1], R)
    first = R - M
    has_mid = (steps - n_w + 1) <= (steps - gamma - 1)
    mid_mass = np.where(has_mid, cum[steps - gamma] - cum[np.minimum(steps - n_w + 1, steps - gamma)], 0.0)
    mid_heat = np.where(has_mid, heat_cum[steps - gamma] - heat_cum[np.minimum(steps - n_w + 1, steps - gamma)], 0.0)
    last = m[steps] + M - S
    no_loss = (first * temps[steps - gamma] + mid_heat + last * temps[steps - n_w]) / m[steps]
    amb = params.tau_ambient if tau_ambient is None else tau_ambient
    factor = np.exp(-params.loss_rate * (gamma + 0.5 + (S - R) / m[steps]))
    outlet = amb + (no_loss - amb) * factor
    return NodeMethod(gamma, n_w, R, S, no_loss, factor, outlet, first, mid_mass, last)


def delays(history: PipeHistory, i: int, params: DhsParams = DhsParams()):
    """``(gamma_i, n_w_i)`` for absolute history index ``i``."""
    flows = np.asarray(history.mass_flows[: i + 1], dtype=float)
    cum = np.concatenate(([0.0], np.cumsum(flows * params.dt)))
    g, n = _delays(cum, np.array([i]), params.pipe_mass)
    return int(g[0]), int(n[0])


def flow_masses(history: PipeHistory, i: int, gamma: int, n_w: int, params: DhsParams = DhsParams()):
    """``(R_i, S_i)`` in kg."""
    m = np.asarray(history.mass_flows, dtype=float) * params.dt
    R = float(np.sum(m[i - gamma: i + 1]))
    S = float(np.sum(m[i - n_w + 1: i + 1])) if n_w >= gamma + 1 else R
    return R, S


def outlet_temp_no_loss(history: PipeHistory, i: int, params: DhsParams = DhsParams()) -> float:
    nm = node_method(history.mass_flows[: i + 1], history.inlet_temps[: i + 1], params)
    return float(nm.outlet_no_loss[0])


def outlet_temp_with_loss(tau_no_loss: float, history: PipeHistory, i: int, params: DhsParams = DhsParams()) -> float:
    gamma, n_w = delays(history, i, params)
    R, S = flow_masses(history, i, gamma, n_w, params)
    m_i = history.mass_flows[i] * params.dt
    factor = math.exp(-params.loss_rate * (gamma + 0.5 + (S - R) / m_i))
    return params.tau_ambient + (tau_no_loss - params.tau_ambient) * factor


def chp_heat_to_flow(h_mw, tau_in, tau_ret=0.0, params: DhsParams = DhsParams()):
    """Mass flow (kg/s) carrying ``h_mw`` of heat, clamped to the flow bounds.

    Returns ``(flow, clamped)``; works elementwise on arrays.
    """
    tau_in = np.asarray(tau_in, dtype=float)
    if np.any(tau_in <= tau_ret):
        raise InvalidTemperature("supply temperature must exceed return temperature")
    raw = np.asarray(h_mw, dtype=float) * MW / (params.heat_capacity * (tau_in - tau_ret))
    flow = np.clip(raw, params.min_flow, params.max_flow)
    clamped = flow != raw
    if flow.ndim == 0:
        return float(flow), bool(clamped)
    return flow, clamped


# --------------------------------------------------------------------------
# Simulation

@dataclass
class SimResult:
    delivered: np.ndarray  # MW
    states: list  # SimState per step
    violations: np.ndarray  # delivered - demand, MW
    node: NodeMethod
    clamped: np.ndarray


def warmup_history(params: DhsParams, heat_mw: float, n_steps: Optional[int] = None,
                   tau_in: Optional[float] = None) -> PipeHistory:
    """Steady operation at ``heat_mw`` long enough to cover any delay."""
    tau_in = params.tau_supply if tau_in is None else tau_in
    flow, _ = chp_heat_to_flow(heat_mw, tau_in, params.tau_return, params)
    return PipeHistory.steady(n_steps or params.history_length, tau_in, flow)


def simulate(schedule, demand, params: DhsParams = DhsParams(), init_history: Optional[PipeHistory] = None,
             supply_temps=None) -> SimResult:
    """Roll the pipe forward over ``schedule`` (rows of (heat MW, power MW)).

    ``supply_temps`` overrides the fixed supply temperature per step.
    """
    sched = np.asarray(schedule, dtype=float).reshape(-1, 2)
    T = len(sched)
    demand = np.asarray(demand, dtype=float)
    if demand.shape != (T,):
        raise ContractViolation("demand length must match the schedule")
    temps = np.full(T, params.tau_supply) if supply_temps is None else np.asarray(supply_temps, dtype=float)
    if init_history is None:
        init_history = warmup_history(params, sched[0, 0], tau_in=temps[0])
    flows, clamped = chp_heat_to_flow(sched[:, 0], temps, params.tau_return, params)
    all_flows = np.concatenate((init_history.mass_flows, flows))
    all_temps = np.concatenate((init_history.inlet_temps, temps))
    steps = np.arange(len(init_history), len(all_flows))
    nm = node_method(all_flows, all_temps, params, steps)
    delivered = params.heat_capacity * flows * (nm.outlet - params.tau_return) / MW
    states = [SimState(float(a), float(b), float(c)) for a, b, c in zip(temps, nm.outlet, flows)]
    return SimResult(delivered, states, delivered - demand, nm, np.asarray(clamped))


# --------------------------------------------------------------------------
# Demand

def load_demand(path) -> np.ndarray:
    """One positive decimal per line (hourly MW). Blank lines and ``#`` comments are skipped."""
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.split("#", 1)[0].strip().rstrip(",")
        if not s:
            continue
        try:
            v = float(s)
        except ValueError:
            if not values and lineno == 1:
                continue  # header
            raise DataFormatError(f"{path}:{lineno}: not a number: {s!r}") from None
        if not math.isfinite(v) or v < 0:
            raise DataFormatError(f"{path}:{lineno}: demand must be a non-negative number")
        values.append(v)
    if not values:
        raise DataFormatError(f"{path}: no demand values")
    return np.array(values)


def save_demand(path, demand):
    Path(path).write_text("".join(f"{v!r}\n" for v in map(float, demand)))


def scale_demand(v, target_max: float = 67.0) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size == 0 or np.any(v < 0) or v.max() <= 0:
        raise DataFormatError("demand must be non-empty, non-negative and not all zero")
    return v * (target_max / v.max())


SEASONS = {
    # (peak MW, trough MW)
    "winter": (67.0, 50.0),
    "spring": (29.0, 17.0),
}


def synthetic_demand(rng: Optional[np.random.Generator] = None, horizon: int = 12, season: str = "winter",
                     noise: float = 0.02) -> np.ndarray:
    """Daytime profile: a sinusoid between trough and peak plus mild noise, rescaled to the peak."""
    rng = np.random.default_rng(0) if rng is None else rng
    peak, trough = SEASONS[season]
    t = np.arange(horizon)
    phase = rng.uniform(0.0, 2 * np.pi)
    shape = 0.5 * (1 + np.sin(2 * np.pi * t / max(horizon, 2) + phase))
    base = trough + (peak - trough) * shape
    base *= 1 + noise * rng.standard_normal(horizon)
    base = np.maximum(base, 0.5 * trough)
    return scale_demand(base, peak)


# --------------------------------------------------------------------------
# Training data for the surrogate

STATE_NAMES = ("tin", "tout", "mdot")


def window_columns(n_w: int) -> list[str]:
    cols = []
    for lag in range(n_w, -1, -1):
        cols += [f"h_m{lag}", f"p_m{lag}"]
    return cols


def dataset_columns(n_w: int) -> list[str]:
    return (["episode", "step"] + [f"s_prev_{s}" for s in STATE_NAMES] + window_columns(n_w)
            + [f"s_{s}" for s in STATE_NAMES] + ["y", "q"])


@dataclass
class Dataset:
    columns: list
    data: np.ndarray  # rows x columns
    n_w: int
    train_episodes: np.ndarray
    test_episodes: np.ndarray

    def col(self, *names):
        idx = [self.columns.index(n) for n in names]
        return self.data[:, idx]

    def split(self):
        ep = self.data[:, 0].astype(int)
        tr = np.isin(ep, self.train_episodes)
        return self.data[tr], self.data[~tr]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.data:
                w.writerow([int(row[0]), int(row[1])] + [repr(float(v)) for v in row[2:]])

    @classmethod
    def from_csv(cls, path, train_fraction=0.8, seed=0):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in r] for r in reader]
        if not rows:
            raise DataFormatError(f"{path}: empty dataset")
        data = np.array(rows)
        n_w = sum(1 for c in header if c.startswith("h_m")) - 1
        if header != dataset_columns(n_w):
            raise DataFormatError(f"{path}: unexpected columns")
        tr, te = split_episodes(np.unique(data[:, 0].astype(int)), train_fraction, seed)
        return cls(header, data, n_w, tr, te)


def split_episodes(episodes, train_fraction, seed):
    rng = np.random.default_rng(seed)
    ep = rng.permutation(np.asarray(episodes))
    n_train = max(1, int(round(train_fraction * len(ep)))) if len(ep) > 1 else len(ep)
    return np.sort(ep[:n_train]), np.sort(ep[n_train:])


def random_walk_schedule(rng, horizon, polygon: ConvexPolygon, start_heat, sigma=6.0, jump_prob=0.15):
    """(heat, power) pairs wandering inside the polygon."""
    h_lo, h_hi = polygon.vertices[:, 0].min(), polygon.vertices[:, 0].max()
    out = np.empty((horizon, 2))
    h = start_heat
    for i in range(horizon):
        if rng.random() < jump_prob:
            h = rng.uniform(h_lo, h_hi)
        else:
            h = float(np.clip(h + sigma * rng.standard_normal(), h_lo, h_hi))
        lo, hi = polygon.lower_edge(h)[0], polygon.upper_edge(h)[0]
        p = lo + (hi - lo) * rng.beta(1.0, 4.0)
        out[i] = h, p
    return out


def generate_dataset(params: DhsParams = DhsParams(), n_episodes: int = 100, seed: int = 0, n_w: int = 11,
                     train_fraction: float = 0.8, heat_range=(2.0, 70.0)) -> Dataset:
    """Simulated rows ``(s_{i-1}, (h, p)_{i-n_w..i}, s_i, y_i)``, one per step.

    Each episode warms up at a random steady heat, then follows a random walk
    in the CHP region for ``params.horizon`` steps against a synthetic demand.
    """
    if n_episodes < 1:
        raise ContractViolation("n_episodes must be >= 1")
    poly = params.polygon
    rng = np.random.default_rng(seed)
    T = params.horizon
    n_hist = max(params.history_length, n_w + 1)
    rows = []
    for ep in range(n_episodes):
        erng = np.random.default_rng([seed, ep])
        season = "winter" if erng.random() < 0.5 else "spring"
        demand = synthetic_demand(erng, T, season)
        h_warm = erng.uniform(*heat_range)
        p_warm = float(poly.lower_edge(h_warm)[0])
        hist = warmup_history(params, h_warm, n_hist)
        sched = random_walk_schedule(erng, T, poly, h_warm)
        sched[:, 0] = np.maximum(sched[:, 0], heat_range[0])
        sched = poly.project(sched)
        res = simulate(sched, demand, params, hist)
        warm_out = node_method(hist.mass_flows, hist.inlet_temps, params).outlet[0]
        full = np.vstack((np.tile([h_warm, p_warm], (n_w, 1)), sched))
        prev = SimState(hist.inlet_temps[-1], float(warm_out), hist.mass_flows[-1])
        for i in range(T):
            window = full[i: i + n_w + 1].ravel()
            s = res.states[i]
            rows.append([ep, i, *prev, *window, *s, res.delivered[i], demand[i]])
            prev = s
    data = np.array(rows)
    tr, te = split_episodes(np.arange(n_episodes), train_fraction, seed)
    del rng
    return Dataset(dataset_columns(n_w), data, n_w, tr, te)
