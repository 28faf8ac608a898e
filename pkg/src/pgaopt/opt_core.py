"""Projected Adam inner solver, feasible sets and gradient checking.

Everything here works on flat float64 vectors. Feasible sets that act per
time step (the CHP polygon) reshape internally.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolation, NumericalFailure

ValueAndGrad = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


# --------------------------------------------------------------------------
# Adam

@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8

    @classmethod
    def fresh(cls, n, learning_rate=0.01, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, **kw)

    def reset(self) -> "AdamState":
        """Same hyperparameters, zeroed moments."""
        n = self.first_moment.shape
        return replace(self, first_moment=np.zeros(n), second_moment=np.zeros(n), step_count=0)


def adam_step(state: AdamState, iterate: np.ndarray, gradient: np.ndarray):
    """One bias-corrected Adam update. Returns ``(new_state, new_iterate)``."""
    if iterate.shape != state.first_moment.shape or gradient.shape != iterate.shape:
        raise ContractViolation(
            f"shape mismatch: iterate {iterate.shape}, gradient {gradient.shape}, "
            f"moments {state.first_moment.shape}"
        )
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = b1 * state.first_moment + (1.0 - b1) * gradient
    v = b2 * state.second_moment + (1.0 - b2) * gradient * gradient
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = iterate - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_stab)
    return replace(state, first_moment=m, second_moment=v, step_count=t), new


# --------------------------------------------------------------------------
# Feasible sets

class FeasibleSet:
    dim: int

    def project(self, point: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, point: np.ndarray, tol: float = 1e-9) -> bool:
        raise NotImplementedError

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Componentwise bounding box of the set."""
        raise NotImplementedError


class BoxSet(FeasibleSet):
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ContractViolation("box needs lo <= hi with matching shapes")
        self.dim = self.lo.size

    def project(self, point):
        point = np.asarray(point, dtype=float)
        if point.shape != self.lo.shape:
            raise ContractViolation(f"point shape {point.shape} != box shape {self.lo.shape}")
        return np.clip(point, self.lo, self.hi)

    def contains(self, point, tol=1e-9):
        return bool(np.all(point >= self.lo - tol) and np.all(point <= self.hi + tol))

    def bounds(self):
        return self.lo.copy(), self.hi.copy()


class ConvexPolygon:
    """Convex polygon in the plane, stored counter-clockwise."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ContractViolation("polygon needs at least three 2-D vertices")
        edges = np.roll(v, -1, axis=0) - v
        turns = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if np.all(turns < 0):
            v = v[::-1].copy()
        elif not np.all(turns > 0):
            raise ContractViolation("polygon vertices are not strictly convex")
        self.vertices = v
        self._a = v
        self._d = np.roll(v, -1, axis=0) - v
        self._dd = np.einsum("ij,ij->i", self._d, self._d)

    def signed_margins(self, pts):
        """(m, n_edges) cross products; all >= 0 means inside."""
        rel = pts[:, None, :] - self._a[None, :, :]
        return self._d[None, :, 0] * rel[..., 1] - self._d[None, :, 1] * rel[..., 0]

    def project(self, pts):
        pts = np.asarray(pts, dtype=float)
        inside = np.all(self.signed_margins(pts) >= 0.0, axis=1)
        if inside.all():
            return pts.copy()
        out = pts.copy()
        p = pts[~inside]
        rel = p[:, None, :] - self._a[None, :, :]
        t = np.clip(np.einsum("mkj,kj->mk", rel, self._d) / self._dd, 0.0, 1.0)
        closest = self._a[None, :, :] + t[..., None] * self._d[None, :, :]
        d2 = np.sum((closest - p[:, None, :]) ** 2, axis=2)
        best = np.argmin(d2, axis=1)
        out[~inside] = closest[np.arange(len(p)), best]
        return out

    def lower_edge(self, x):
        """Smallest second coordinate of the polygon at first coordinate ``x``."""
        return self._edge_extreme(x, np.min)

    def upper_edge(self, x):
        return self._edge_extreme(x, np.max)

    def _edge_extreme(self, x, pick):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        vals = []
        for xi in x:
            ys = []
            for a, d in zip(self._a, self._d):
                if d[0] == 0.0:
                    if abs(xi - a[0]) < 1e-12:
                        ys += [a[1], a[1] + d[1]]
                    continue
                t = (xi - a[0]) / d[0]
                if -1e-12 <= t <= 1 + 1e-12:
                    ys.append(a[1] + t * d[1])
            if not ys:
                raise ContractViolation(f"x={xi} outside polygon range")
            vals.append(pick(ys))
        return np.array(vals)


class PolygonSet(FeasibleSet):
    """The same convex polygon applied to every (heat, power) pair of a trajectory.

    Flat layout is ``(h1, p1, h2, p2, ...)``.
    """

    def __init__(self, vertices, horizon: int):
        self.polygon = ConvexPolygon(vertices)
        self.horizon = int(horizon)
        self.dim = 2 * self.horizon

    def project(self, point):
        point = np.asarray(point, dtype=float)
        if point.shape != (self.dim,):
            raise ContractViolation(f"point shape {point.shape} != ({self.dim},)")
        return self.polygon.project(point.reshape(-1, 2)).ravel()

    def contains(self, point, tol=1e-9):
        pts = np.asarray(point, dtype=float).reshape(-1, 2)
        return bool(np.all(self.polygon.signed_margins(pts) >= -tol))

    def bounds(self):
        lo = self.polygon.vertices.min(axis=0)
        hi = self.polygon.vertices.max(axis=0)
        return np.tile(lo, self.horizon), np.tile(hi, self.horizon)


def project(feasible_set: FeasibleSet, point) -> np.ndarray:
    return feasible_set.project(point)


# --------------------------------------------------------------------------
# Inner solver

@dataclass(frozen=True)
class GdStopRule:
    """Inner-loop termination.

    ``mode="span"`` stops once the iterate moved less than ``delta`` (max-norm)
    over the last ``window_n`` iterations. ``mode="per_step"`` instead needs
    ``window_n`` consecutive single steps each below ``delta``.
    """

    window_n: int = 50
    delta: float = 1e-6
    max_inner_iters: int = 200_000
    mode: str = "span"

    def __post_init__(self):
        if self.window_n < 1 or self.delta <= 0 or self.max_inner_iters < 1:
            raise ContractViolation("stop rule needs window_n >= 1, delta > 0, max_inner_iters >= 1")
        if self.mode not in ("span", "per_step"):
            raise ContractViolation(f"unknown stop mode {self.mode!r}")


@dataclass
class InnerResult:
    x: np.ndarray
    iterations: int
    status: str  # converged | max_iters | deadline
    last_value: float
    last_grad: np.ndarray


def inner_solve(
    fn: ValueAndGrad,
    feasible_set: FeasibleSet,
    start,
    adam: Optional[AdamState] = None,
    stop: Optional[GdStopRule] = None,
    *,
    deadline: Optional[float] = None,
    checkpoint: Optional[Callable[[np.ndarray, int], None]] = None,
    checkpoint_every: int = 500,
    check_feasible: bool = False,
) -> InnerResult:
    """Projected Adam on ``fn`` from ``start`` until the stop rule fires.

    ``fn`` returns ``(value, gradient)``. ``deadline`` is a ``time.monotonic``
    timestamp; hitting it ends the solve with status ``"deadline"``.
    ``checkpoint(x, j)`` is called every ``checkpoint_every`` iterations.
    """
    stop = stop or GdStopRule()
    x = np.array(start, dtype=float)
    if not feasible_set.contains(x, tol=1e-9):
        raise ContractViolation("inner solve must start inside the feasible set")
    adam = adam.reset() if adam is not None else AdamState.fresh(x.size)
    if adam.first_moment.shape != x.shape:
        adam = AdamState.fresh(x.size, adam.learning_rate, beta1=adam.beta1,
                               beta2=adam.beta2, eps_stab=adam.eps_stab)
    n_win = stop.window_n
    span = stop.mode == "span"
    ring = np.empty((n_win + 1, x.size)) if span else None
    if span:
        ring[0] = x
    calm = 0
    status = "max_iters"
    value, grad = np.nan, np.zeros_like(x)
    j = 0
    while j < stop.max_inner_iters:
        value, grad = fn(x)
        if not np.all(np.isfinite(grad)) or not np.isfinite(value):
            raise NumericalFailure(f"non-finite penalty value/gradient at inner iteration {j}", iterate=x.copy())
        adam, stepped = adam_step(adam, x, grad)
        x_new = feasible_set.project(stepped)
        if check_feasible and not feasible_set.contains(x_new):
            raise AssertionError(f"iterate left the feasible set at inner iteration {j}")
        j += 1
        if span:
            ring[j % (n_win + 1)] = x_new
            if j >= n_win and np.max(np.abs(x_new - ring[(j - n_win) % (n_win + 1)])) < stop.delta:
                x = x_new
                status = "converged"
                break
        else:
            calm = calm + 1 if np.max(np.abs(x_new - x)) < stop.delta else 0
            if calm >= n_win:
                x = x_new
                status = "converged"
                break
        x = x_new
        if checkpoint is not None and j % checkpoint_every == 0:
            checkpoint(x, j)
        if deadline is not None and (j & 31) == 0 and time.monotonic() >= deadline:
            status = "deadline"
            break
    return InnerResult(x, j, status, float(value), grad)


# --------------------------------------------------------------------------
# Gradient verification

def central_differences(f: Callable[[np.ndarray], float], x, fd_step: float) -> np.ndarray:
    """Central-difference derivative of ``f`` at ``x``.

    Scalar ``f`` gives a gradient of shape ``x.shape``; vector ``f`` with
    ``m`` outputs gives an ``(m, x.size)`` Jacobian.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = fd_step
        fp, fm = np.asarray(f(x + e), dtype=float), np.asarray(f(x - e), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericalFailure(f"non-finite function value near coordinate {i}", iterate=x.copy())
        cols.append((fp - fm) / (2.0 * fd_step))
    if not cols:
        return np.empty_like(x)
    return np.stack(cols, axis=-1)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max coordinatewise ``|a - n| / max(|a|, |n|, floor * max(1, ||n||_inf))``."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = floor * max(1.0, float(np.max(np.abs(numeric), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def check_gradient(fn: ValueAndGrad, point, fd_step: float = 1e-5) -> float:
    """Max relative error between ``fn``'s gradient and central differences."""
    if fd_step <= 0:
        raise ContractViolation("fd_step must be positive")
    point = np.asarray(point, dtype=float)
    _, analytic = fn(point)
    numeric = central_differences(lambda z: fn(z)[0], point, fd_step)
    return relative_error(analytic, numeric)
