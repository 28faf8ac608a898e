import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pgaopt import ndim
from pgaopt.errors import ContractViolation, NumericalFailure
from pgaopt.opt_core import check_gradient
from pgaopt.problem import PenaltyFunction

box_points = arrays(float, 3, elements=st.floats(0, 10))


def test_evaluate_hand_example():
    ev = ndim.evaluate([4.0, 2.0, 2.0])
    np.testing.assert_allclose(ev.f, [math.exp(3.1), math.exp(5.05), math.exp(3.4)], rtol=1e-14)
    assert ev.J == 8.0
    np.testing.assert_allclose(ev.jac_f[2], math.exp(3.4) * np.array([0.1, 0.5, 1.0]), rtol=1e-14)


def test_evaluate_rejects_bad_shape_and_overflow():
    with pytest.raises(ContractViolation):
        ndim.evaluate([1.0, 2.0])
    with pytest.raises(NumericalFailure):
        ndim.evaluate([1000.0, 0.0, 0.0])


@given(box_points, st.integers(0, 2), st.floats(1e-3, 1.0))
def test_constraints_monotone_in_every_variable(u, j, d):
    up = u.copy()
    up[j] += d
    assert np.all(ndim.evaluate(up).f >= ndim.evaluate(u).f)


@given(box_points)
def test_constraint_i_ignores_later_variables(u):
    jac = ndim.evaluate(u).jac_f
    assert jac[0, 1] == jac[0, 2] == jac[1, 2] == 0.0


@given(arrays(float, 3, elements=st.floats(0.5, 9.5)))
def test_penalty_gradient_matches_finite_differences(u):
    assert check_gradient(PenaltyFunction(ndim.NdimProblem(), 0.05), u, 1e-6) < 1e-4


def test_tight_point_makes_all_constraints_equalities():
    t = ndim.tight_point()
    np.testing.assert_allclose(ndim.evaluate(t).f, ndim.RHS, rtol=1e-12)
    assert t.sum() == pytest.approx(6.5100, abs=1e-4)


def test_table_inits_are_feasible():
    p = ndim.NdimProblem()
    assert len(ndim.REFERENCE_INITS) == 20
    for u in ndim.REFERENCE_INITS:
        assert np.all(p.residuals(np.array(u, dtype=float)) >= 0)


def test_sampler_returns_feasible_integer_points():
    p = ndim.NdimProblem()
    rng = np.random.default_rng(0)
    for _ in range(20):
        u = p.sample_feasible(rng)
        assert np.all(u == np.round(u)) and p.is_feasible(u)


def test_oracle_matches_analytic_optimum():
    res = ndim.oracle_optimum()
    assert res.J <= 6.511
    # y = 0 is optimal: x from the second constraint, z from the third
    x = math.log(100.0) - 0.05
    z = math.log(10.0) - 0.1 * x
    assert res.J == pytest.approx(x + z, abs=1e-3)
    assert ndim.evaluate(res.u).f[1] >= 100.0 * (1 - 1e-9)


def test_oracle_edge_cases():
    t = ndim.tight_point()
    single = ndim.oracle_optimum(t + 0.5, t + 0.5)
    np.testing.assert_allclose(single.u, t + 0.5)
    assert ndim.oracle_optimum((0, 0, 0), (1, 1, 1)) is None
    with pytest.raises(ContractViolation):
        ndim.oracle_optimum(grid_step=0.0)
