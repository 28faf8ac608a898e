"""Three-variable analytic test problem with exponential constraints.

    min x + y + z
    s.t. exp(0.1 + 0.75 x)        >= 15
         exp(0.05 + x + 0.5 y)    >= 100
         exp(0.1 x + 0.5 y + z)   >= 10

The variables play the role of time steps 1..3, so constraint i sees
variables 1..i (window of 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractViolation, NumericalFailure
from .opt_core import BoxSet
from .problem import PenaltyProblem

# exponent = offset + coeffs @ (x, y, z)
EXP_OFFSETS = np.array([0.1, 0.05, 0.0])
EXP_COEFFS = np.array([
    [0.75, 0.0, 0.0],
    [1.0, 0.5, 0.0],
    [0.1, 0.5, 1.0],
])
RHS = np.array([15.0, 100.0, 10.0])

# feasible starting points used for the tractability study
REFERENCE_INITS = [
    (4, 2, 2), (4, 3, 2), (4, 4, 2), (4, 5, 2), (4, 5, 3),
    (4, 3, 4), (4, 3, 5), (4, 4, 4), (4, 5, 4), (4, 4, 5),
    (4, 5, 5), (5, 3, 4), (5, 4, 4), (5, 5, 4), (5, 4, 5),
    (5, 5, 5), (5, 6, 6), (6, 5, 5), (5, 6, 5), (6, 5, 6),
]

_MAX_EXPONENT = 700.0


def tight_point() -> np.ndarray:
    """The point where all three constraints hold with equality."""
    x = (math.log(15.0) - 0.1) / 0.75
    y = 2.0 * (math.log(100.0) - 0.05 - x)
    z = math.log(10.0) - 0.1 * x - 0.5 * y
    return np.array([x, y, z])


@dataclass
class NdimEvaluation:
    J: float
    f: np.ndarray
    grad_J: np.ndarray
    jac_f: np.ndarray


def evaluate(u) -> NdimEvaluation:
    u = np.asarray(u, dtype=float)
    if u.shape != (3,):
        raise ContractViolation(f"expected (x, y, z), got shape {u.shape}")
    expo = EXP_OFFSETS + EXP_COEFFS @ u
    if np.any(expo > _MAX_EXPONENT) or not np.all(np.isfinite(expo)):
        raise NumericalFailure("constraint exponent overflows", iterate=u.copy())
    f = np.exp(expo)
    return NdimEvaluation(float(u.sum()), f, np.ones(3), f[:, None] * EXP_COEFFS)


class NdimProblem(PenaltyProblem):
    name = "ndim"
    n_window = 2

    def __init__(self, lo=(0.0, 0.0, 0.0), hi=(10.0, 10.0, 10.0)):
        self.feasible_set = BoxSet(lo, hi)
        self.horizon = 3
        self.rhs = RHS.copy()

    def objective(self, u):
        return float(np.sum(u))

    def objective_grad(self, u):
        return np.ones(3)

    def constraints_and_jac(self, u):
        ev = evaluate(u)
        return ev.f, ev.jac_f

    def sample_feasible(self, rng, lo=2, hi=6, max_tries=10_000):
        box_lo, box_hi = self.feasible_set.bounds()
        for _ in range(max_tries):
            u = rng.integers(lo, hi + 1, size=3).astype(float)
            u = np.clip(u, box_lo, box_hi)
            if np.all(self.constraints(u) >= self.rhs):
                return u
        raise ContractViolation("no feasible integer start found in the requested range")


@dataclass
class OracleResult:
    u: np.ndarray
    J: float


def _feasible(u, rtol=1e-12):
    return bool(np.all(evaluate(u).f >= RHS * (1.0 - rtol)))


def oracle_optimum(lo=(0.0, 0.0, 0.0), hi=(10.0, 10.0, 10.0), grid_step=0.01) -> Optional[OracleResult]:
    """Brute-force optimum: grid search followed by coordinate bisection.

    For every (x, y) on the grid the smallest grid z meeting the third
    constraint is taken, which is equivalent to scanning the full 3-D grid
    because the objective and all constraints are monotone in z. Returns
    ``None`` when no grid point is feasible.
    """
    if grid_step <= 0:
        raise ContractViolation("grid_step must be positive")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    axes = [np.arange(lo[k], hi[k] + 0.5 * grid_step, grid_step) if hi[k] > lo[k] else np.array([lo[k]])
            for k in range(3)]
    axes = [np.minimum(a, hi[k]) for k, a in enumerate(axes)]
    X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
    rtol = 1e-12
    ok = (np.exp(0.1 + 0.75 * X) >= 15.0 * (1 - rtol)) & (np.exp(0.05 + X + 0.5 * Y) >= 100.0 * (1 - rtol))
    z_need = math.log(10.0) - 0.1 * X - 0.5 * Y
    zs = axes[2]
    idx = np.searchsorted(zs, z_need - 1e-12, side="left")
    ok &= idx < len(zs)
    if not np.any(ok):
        return None
    Z = zs[np.minimum(idx, len(zs) - 1)]
    J = np.where(ok, X + Y + Z, np.inf)
    i, j = np.unravel_index(np.argmin(J), J.shape)
    best = np.array([X[i, j], Y[i, j], Z[i, j]])
    best = _refine(best, lo)
    return OracleResult(best, float(best.sum()))


def _refine(u, lo, sweeps=20, iters=60):
    """Lower each coordinate by bisection while the point stays feasible."""
    u = u.copy()
    for _ in range(sweeps):
        moved = False
        for k in range(3):
            a, b = lo[k], u[k]  # b feasible
            trial = u.copy()
            trial[k] = a
            if _feasible(trial):
                if a < u[k]:
                    moved = True
                u[k] = a
                continue
            for _ in range(iters):
                mid = 0.5 * (a + b)
                trial[k] = mid
                if _feasible(trial):
                    b = mid
                else:
                    a = mid
            if b < u[k] - 1e-15:
                moved = True
            u[k] = b
        if not moved:
            break
    return u
