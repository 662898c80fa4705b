import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbmpc import garding, ocp
from rbmpc.estimators import control_error_bound, BoundConstants, ResidualNorms
from rbmpc.problem import Problem

from conftest import definition_1d


@pytest.fixture(scope="module")
def small():
    return Problem(definition_1d(30))


def test_zero_shift_is_identity(small):
    spec = small.ocp_spec([8.0, 1e-2], 5)
    hat, g = garding.transform_spec(spec, 0.0)
    assert hat is spec and g.control_factor == 1.0
    y0 = small.initial_condition()
    model = small.truth_model([8.0, 1e-2])
    a = ocp.solve_ocp(spec, model, y0)
    b = garding.untransform_solution(ocp.solve_ocp(hat, model, y0), g)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.y, b.y)


def test_negative_shift_rejected(small):
    with pytest.raises(ValueError):
        garding.transform_spec(small.ocp_spec([8.0, 1e-2], 5), -1.0)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 50.0), st.integers(1, 30))
def test_round_trip_is_identity(delta, K):
    rng = np.random.default_rng(K)
    sol = ocp.TrajectorySolution(y=rng.standard_normal((K + 1, 3)), p=rng.standard_normal((K + 1, 3)),
                                 u=rng.standard_normal((K + 1, 2)), J=1.0)
    g = garding.GardingData(delta, 0.01, K)
    back = garding.transform_solution(garding.untransform_solution(sol, g), g)
    for name in ("y", "p", "u"):
        assert np.allclose(getattr(back, name), getattr(sol, name), rtol=1e-13, atol=0)


def direct_and_transformed(problem, mu, K, y0, constrained=False):
    spec = problem.ocp_spec(mu, K, constrained)
    direct_model = problem.truth_model(mu)   # weakly coercive operator, no shift
    opts = ocp.SolverOptions(tol_abs=1e-14, tol_rel=1e-13)
    if constrained:
        direct = ocp.solve_ocp(spec, direct_model, y0, opts)
    else:
        direct = ocp.kkt_direct_solve(spec, direct_model, y0)
    hat_sol, hat_spec, g, _ = problem.solve_truth(mu, K, y0, constrained, options=opts)
    return spec, direct, hat_sol, garding.untransform_solution(hat_sol, g)


def test_transformed_path_equals_direct_solve(small):
    y0 = small.initial_condition()
    rng = np.random.default_rng(0)
    for _ in range(4):
        mu = [rng.uniform(3, 15), 10 ** rng.uniform(-4, -1)]
        spec, direct, hat, back = direct_and_transformed(small, mu, 8, y0)
        assert spec.u_norm(back.u - direct.u) <= 1e-9 * spec.u_norm(direct.u)
        assert np.abs(back.y - direct.y).max() <= 1e-9 * np.abs(direct.y).max()
        assert abs(hat.J - direct.J) <= 1e-10 * abs(direct.J)


def test_transformed_path_with_bounds():
    d = definition_1d(20)
    d["ocp"]["bounds"] = [-0.05, 0.05]
    p = Problem(d)
    y0 = p.initial_condition()
    spec, direct, hat, back = direct_and_transformed(p, [10.0, 1e-3], 6, y0, constrained=True)
    assert spec.u_norm(back.u - direct.u) <= 1e-8 * spec.u_norm(direct.u)
    assert back.u[1:].max() <= 0.05 + 1e-12


def test_control_factor_and_continuous_factor():
    g = garding.GardingData(14.0, 0.01, 20)
    assert math.isclose(g.continuous_factor, math.exp(2.8))
    assert abs(g.continuous_factor - 16.44) < 0.01
    assert math.isclose(g.control_factor, (1 / (1 - 0.14)) ** 19)
    assert math.isclose(garding.hatted_control_bound(2.0, g), 2.0 * g.control_factor)
    # the cost bound carries no factor
    assert garding.hatted_cost_bound(3.5, g) == 3.5


def test_zero_shift_bound_reduces_to_plain_bound():
    norms = ResidualNorms(np.array([0.3, 0.1]), np.array([0.2, 0.4]), np.zeros(2), 0.1)
    c = BoundConstants(1.0, 0.6, 2.0, 1.0, 0.0, 0.5)
    du, _, _ = control_error_bound(norms, 0.05, c)
    g = garding.GardingData(0.0, 0.1, 2)
    assert garding.hatted_control_bound(du, g) == du


def test_transformed_weights():
    p = Problem(definition_1d(10))
    spec = p.ocp_spec([5.0, 1e-2], 4)
    hat, g = garding.transform_spec(spec, 5.0)
    rho = 1 / (1 - 5.0 * spec.tau)
    k = np.arange(5)
    assert np.allclose(hat.sigma1, spec.sigma1 * rho ** (2 * k))
    assert np.allclose(hat.lam[1:], spec.lam[1:] * rho ** (2 * (k[1:] - 1)))
    assert np.all(hat.lam > 0) and np.all(hat.sigma1 > 0)
    assert np.isclose(g.mass_shift, rho * 5.0) and np.isclose(g.theta_scale, rho)
