"""The problem contract shared by every domain, and the functions built on it.

A problem is ``min J(u) s.t. f_i(u) >= q_i, i = 1..T`` over a feasible set,
with ``J`` increasing and each ``f_i`` non-decreasing in the decision vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericalFailure
from .opt_core import FeasibleSet


class PenaltyProblem:
    """Base class for a domain. Subclasses fill in the oracles."""

    horizon: int
    rhs: np.ndarray
    feasible_set: FeasibleSet
    n_window: int = 0
    name: str = "problem"

    # -- oracles ---------------------------------------------------------
    def objective(self, u) -> float:
        raise NotImplementedError

    def objective_grad(self, u) -> np.ndarray:
        raise NotImplementedError

    def constraints_and_jac(self, u) -> tuple[np.ndarray, np.ndarray]:
        """``f(u)`` of shape (T,) and its Jacobian of shape (T, dim)."""
        raise NotImplementedError

    def constraints(self, u) -> np.ndarray:
        return self.constraints_and_jac(u)[0]

    # -- hooks with defaults ----------------------------------------------
    def frozen_at(self, u) -> "PenaltyProblem":
        """A problem whose constraint functions are the smooth piece active at ``u``.

        Domains with integer-valued internals (pipe delays) override this so
        finite differences do not straddle a discontinuity.
        """
        return self

    def sample_feasible(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no feasible sampler")

    @property
    def dim(self) -> int:
        return self.feasible_set.dim

    @property
    def feas_tol(self) -> np.ndarray:
        return 1e-6 * np.maximum(1.0, np.abs(self.rhs))

    def residuals(self, u) -> np.ndarray:
        return self.constraints(u) - self.rhs

    def is_feasible(self, u) -> bool:
        return bool(np.all(self.residuals(u) >= -self.feas_tol))


# --------------------------------------------------------------------------

class PenaltyFunction:
    """``J(u) + C * sum_i (f_i(u) - q_i - eps_i)^2`` as a value-and-gradient callable."""

    def __init__(self, problem: PenaltyProblem, C: float, epsilon=None):
        if C <= 0:
            raise ContractViolation("penalty parameter C must be positive")
        eps = np.zeros(problem.horizon) if epsilon is None else np.asarray(epsilon, dtype=float)
        if eps.shape != (problem.horizon,) or np.any(eps < 0):
            raise ContractViolation("epsilon must be a non-negative vector of length T")
        self.problem = problem
        self.C = float(C)
        self.epsilon = eps
        self._shift = problem.rhs + eps

    def __call__(self, u):
        p = self.problem
        f, jac = p.constraints_and_jac(u)
        r = f - self._shift
        value = p.objective(u) + self.C * float(r @ r)
        grad = p.objective_grad(u) + (2.0 * self.C * r) @ jac
        return value, grad

    def value(self, u) -> float:
        return self(u)[0]


class AugmentedLagrangian:
    """``J(u) + sum_i lam_i h_i(u) + rho * sum_i h_i(u)^2`` with ``h = f - q``."""

    def __init__(self, problem: PenaltyProblem, dual, rho: float):
        self.problem = problem
        self.dual = np.asarray(dual, dtype=float)
        self.rho = float(rho)

    def __call__(self, u):
        p = self.problem
        f, jac = p.constraints_and_jac(u)
        h = f - p.rhs
        value = p.objective(u) + float(self.dual @ h) + self.rho * float(h @ h)
        grad = p.objective_grad(u) + (self.dual + 2.0 * self.rho * h) @ jac
        return value, grad


def penalty_value(problem: PenaltyProblem, u, C: float, epsilon=None) -> float:
    value = PenaltyFunction(problem, C, epsilon)(np.asarray(u, dtype=float))[0]
    if not np.isfinite(value):
        raise NumericalFailure("non-finite penalty value", iterate=np.asarray(u))
    return value


@dataclass(frozen=True)
class Infeasibility:
    gamma_max_abs: float
    worst_index: int
    signed_worst: float


def max_infeasibility(problem: PenaltyProblem, u, tol=None) -> Infeasibility:
    """Largest violated residual ``f_i - q_i < 0`` by magnitude; index -1 if none.

    ``tol`` (scalar or per-constraint) treats residuals above ``-tol`` as satisfied;
    by default any negative residual counts.
    """
    return infeasibility_of(problem.residuals(np.asarray(u, dtype=float)), tol)


def infeasibility_of(residuals, tol=None) -> Infeasibility:
    r = np.asarray(residuals, dtype=float)
    limit = 0.0 if tol is None else -np.asarray(tol, dtype=float)
    violated = r < limit
    if not np.any(violated):
        return Infeasibility(0.0, -1, 0.0)
    masked = np.where(violated, r, np.inf)
    i = int(np.argmin(masked))
    return Infeasibility(float(-r[i]), i, float(r[i]))
