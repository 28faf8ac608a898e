"""Delivered-heat constraints of the simplified district heating model.

Ambient and return temperatures are zero and the supply temperature is a
fixed constant, so mass flow is proportional to produced heat. The delivered
heat at step i is the node-method mix evaluated with those flows.

Gradients hold the pipe delays and mass aggregates (gamma, n_w, R, S) fixed
at the evaluation point and differentiate everything that depends on the
produced heats explicitly: the middle mass terms of the mix, the current-step
flow and the flow in the heat-loss exponent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..errors import ContractViolation, InfeasibleSampler
from ..opt_core import PolygonSet
from ..problem import PenaltyProblem
from .physics import MW, DhsParams, NodeMethod, _delays, chp_heat_to_flow, node_method


def chp_cost(u, params: DhsParams) -> float:
    hp = np.asarray(u, dtype=float).reshape(-1, 2)
    return float(params.a0 * hp[:, 0].sum() + params.a1 * hp[:, 1].sum())


def chp_cost_grad(horizon: int, params: DhsParams) -> np.ndarray:
    return np.tile([params.a0, params.a1], horizon)


@dataclass(frozen=True)
class FrozenPipe:
    """Delay quantities held fixed when differentiating."""
    gamma: np.ndarray
    n_w: np.ndarray
    R: np.ndarray
    S: np.ndarray


class SimplifiedDhsProblem(PenaltyProblem):
    name = "dhs_simplified"

    def __init__(self, demand, params: DhsParams = DhsParams(), history_heat: Optional[float] = None,
                 frozen: Optional[FrozenPipe] = None):
        if params.tau_ambient != 0.0 or params.tau_return != 0.0:
            params = replace(params, tau_ambient=0.0, tau_return=0.0)
        if params.tau_supply <= 0:
            raise ContractViolation("supply temperature must be positive")
        self.params = params
        self.rhs = np.asarray(demand, dtype=float).copy()
        self.horizon = len(self.rhs)
        if self.horizon < 1:
            raise ContractViolation("empty demand")
        self.feasible_set = PolygonSet(params.chp_vertices, self.horizon)
        self.polygon = self.feasible_set.polygon
        h_hist = float(self.rhs[0]) if history_heat is None else float(history_heat)
        self.history_heat = h_hist
        hist_flow, _ = chp_heat_to_flow(max(h_hist, 0.0), params.tau_supply, 0.0, params)
        n_hist = params.history_length + 1
        self._hist_flows = np.full(n_hist, hist_flow)
        self._temps = np.full(n_hist + self.horizon, params.tau_supply)
        self._steps = np.arange(n_hist, n_hist + self.horizon)
        self._dflow_dh = MW / (params.heat_capacity * params.tau_supply)
        self._frozen = frozen
        self.n_window = None  # delays vary with the schedule

    # -- objective -------------------------------------------------------
    def objective(self, u):
        return chp_cost(u, self.params)

    def objective_grad(self, u):
        return chp_cost_grad(self.horizon, self.params)

    # -- constraints -----------------------------------------------------
    def _flows(self, u):
        h = np.asarray(u, dtype=float).reshape(-1, 2)[:, 0]
        raw = h * self._dflow_dh
        flows = np.clip(raw, self.params.min_flow, self.params.max_flow)
        active = (raw > self.params.min_flow) & (raw < self.params.max_flow)
        return np.concatenate((self._hist_flows, flows)), active

    def pipe_state(self, u) -> NodeMethod:
        flows, _ = self._flows(u)
        return node_method(flows, self._temps, self.params, self._steps)

    def freeze(self, u) -> FrozenPipe:
        nm = self.pipe_state(u)
        return FrozenPipe(nm.gamma, nm.n_w, nm.R, nm.S)

    def frozen_at(self, u):
        return SimplifiedDhsProblem(self.rhs, self.params, self.history_heat, frozen=self.freeze(u))

    def delivered_heat(self, u):
        """Delivered heat (MW, shape (T,)) and its Jacobian w.r.t. ``u`` (T, 2T)."""
        p = self.params
        flows, active = self._flows(u)
        m = flows * p.dt
        steps = self._steps
        M = p.pipe_mass
        tau = self._temps
        T = self.horizon
        cum = np.concatenate(([0.0], np.cumsum(m)))
        if self._frozen is None:
            gamma, n_w = _delays(cum, steps, M)
            R = cum[steps + 1] - cum[steps - gamma]
            S = np.where(n_w >= gamma + 1, cum[steps + 1] - cum[steps - n_w + 1], R)
        else:
            fz = self._frozen
            gamma, n_w, R, S = fz.gamma, fz.n_w, fz.R, fz.S
        heat_cum = np.concatenate(([0.0], np.cumsum(m * tau)))
        lo_mid = steps - n_w + 1
        hi_mid = steps - gamma - 1
        has_mid = lo_mid <= hi_mid
        mid = np.where(has_mid, heat_cum[steps - gamma] - heat_cum[np.minimum(lo_mid, steps - gamma)], 0.0)
        m_t = m[steps]
        bracket = (R - M) * tau[steps - gamma] + mid + (m_t + M - S) * tau[steps - n_w]
        factor = np.exp(-p.loss_rate * (gamma + 0.5 + (S - R) / m_t))
        scale = p.heat_capacity / p.dt / MW
        y = scale * bracket * factor

        # d y_t / d m_k over horizon steps k, then chain to heats through the flow map
        k = steps[None, :]
        mid_mask = (k >= lo_mid[:, None]) & (k <= hi_mid[:, None])
        dy_dm = np.where(mid_mask, scale * factor[:, None] * tau[steps][None, :], 0.0)
        dy_dm[np.arange(T), np.arange(T)] += scale * factor * (
            tau[steps - n_w] + bracket * p.loss_rate * (S - R) / m_t**2)
        dm_dh = np.where(active, p.dt * self._dflow_dh, 0.0)
        jac = np.zeros((T, 2 * T))
        jac[:, 0::2] = dy_dm * dm_dh[None, :]
        return y, jac

    def constraints_and_jac(self, u):
        return self.delivered_heat(u)

    # -- sampling --------------------------------------------------------
    def min_power(self, h):
        return self.polygon.lower_edge(h)

    def sample_feasible(self, rng, lo=None, hi=None, max_tries=20_000):
        h_max = float(self.polygon.vertices[:, 0].max())
        return sample_feasible_init(self, rng, (60.0 if lo is None else lo, h_max if hi is None else hi),
                                    max_tries=max_tries)


def sample_feasible_init(problem: PenaltyProblem, rng, heat_range=(60.0, 70.0), max_tries: int = 20_000,
                         integer: bool = True) -> np.ndarray:
    """Random feasible schedule: heats drawn in ``heat_range``, power at the region's lower edge.

    Steps whose constraint fails are redrawn; the whole schedule is redrawn
    every 50 attempts. Raises :class:`InfeasibleSampler` after ``max_tries``.
    """
    lo, hi = heat_range
    if lo > hi:
        raise ContractViolation("heat range needs lo <= hi")
    poly = problem.feasible_set.polygon
    T = problem.horizon

    def draw(n):
        if integer:
            return rng.integers(int(np.ceil(lo)), int(np.floor(hi)) + 1, size=n).astype(float)
        return rng.uniform(lo, hi, size=n)

    h = draw(T)
    worst = None
    for attempt in range(max_tries):
        u = np.column_stack((h, poly.lower_edge(h))).ravel()
        r = problem.residuals(u)
        if np.all(r >= 0):
            return u
        worst = float(r.min())
        if attempt % 50 == 49:
            h = draw(T)
        else:
            bad = np.flatnonzero(r < 0)
            h[bad] = draw(bad.size)
    raise InfeasibleSampler(
        f"no feasible schedule in heat range {heat_range} after {max_tries} attempts "
        f"(last worst residual {worst:.3f} MW, max demand {problem.rhs.max():.2f} MW)"
    )


def make_problem(demand, params: DhsParams = DhsParams(), **kw) -> SimplifiedDhsProblem:
    return SimplifiedDhsProblem(demand, params, **kw)
