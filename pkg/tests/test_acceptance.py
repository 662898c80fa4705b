"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runtime is dominated by the minimal-horizon runs (criteria 6 and 7), the
welding omega_min runs (criterion 8) and the full-scale welding timing basis
(criterion 11).
"""

import math
from contextlib import contextmanager

import numpy as np
import pytest

from rbmpc import garding, ocp
from rbmpc.config import preset_config
from rbmpc.mpc import MPCConfig, adaptive_rb_mpc, apply_to_plant, fe_mpc, fe_mpc_step, rb_suboptimality
from rbmpc.problem import Problem
from rbmpc.rb import GreedyConfig, ReducedSolver, pod_greedy
from rbmpc.studies import (closed_loop_state, descent_violations, effectivity_study, rigor_check,
                           time_call, verify_descent)

import conftest
from conftest import COARSE_BOX, definition_1d, definition_welding, welding_training
from oracles import (direct_residual_norms, exhaustive_active_set, random_model, random_spec,
                     unconstrained_optimum)

LAMBDAS = (1e-1, 1e-2, 1e-3, 1e-4)
WELDING_N = (2, 10, 18, 34, 50, 66, 82)


@contextmanager
def criterion(tag, title):
    info = {}
    try:
        yield info
    except BaseException:
        _report(tag, title, "FAIL", info)
        raise
    _report(tag, title, "PASS", info)


def _report(tag, title, status, info):
    extra = ", ".join(f"{k}={v}" for k, v in info.items())
    line = f"{tag} {title}: {status}" + (f" ({extra})" if extra else "")
    conftest.ACCEPTANCE.append(line)
    print(line)


def _g(x):
    return f"{x:.3g}"


# ------------------------------------------------------------------ 1. rigor

def _assert_dominated(checks, where, info):
    worst = 0.0
    for name, err, bound in checks:
        assert err <= bound * (1 + 1e-9) + 1e-13, (where, name, err, bound)
        if bound > 0:
            worst = max(worst, err / bound)
    info["max_err_over_bound"] = _g(worst)


def test_c01_rigor_suite(problem_1d, bundles_1d, problem_welding_half, bundle_welding_half):
    with criterion("C1", "rigor of every bound") as info:
        rng = np.random.default_rng(101)
        x = problem_1d.space.dof_coordinates()[:, 0]
        n_checks = 0
        worst = 0.0
        for i in range(30):
            lam = LAMBDAS[i % 4]
            mu = [rng.uniform(1, 15), lam]
            K = int(rng.integers(1, 21))
            N = int(rng.integers(1, 10))
            kind = i % 3
            if kind == 0:
                y0 = problem_1d.initial_condition()
            elif kind == 1:
                a = rng.standard_normal(4)
                y0 = sum(a[j] * np.sin((j + 1) * math.pi * x / 2) for j in range(4)) / 5
            else:
                y0 = rng.uniform(-0.3, 0.3, x.size)
            checks = rigor_check(problem_1d, bundles_1d[lam].truncated(N), mu, K, y0)
            _assert_dominated(checks, ("1d", mu, K, N, kind), info)
            worst = max(worst, float(info["max_err_over_bound"]))
            n_checks += len(checks)
        n_dofs = problem_welding_half.space.n_dofs
        constrained_count = 0
        for i in range(30):
            mu = [rng.uniform(0.5, 2.0), 10 ** rng.uniform(-6, -4)]
            K = int(rng.integers(5, 76))
            N = int(WELDING_N[i % len(WELDING_N)])
            constrained = i % 2 == 0
            constrained_count += constrained
            kind = i % 3
            if kind == 0:
                y0 = problem_welding_half.initial_condition()
            elif kind == 1:
                y0 = apply_to_plant(problem_welding_half, np.zeros(n_dofs), np.full((10, 1), 40.0), mu)[-1]
            else:
                y0 = rng.uniform(0.0, 1.0, n_dofs)
            checks = rigor_check(problem_welding_half, bundle_welding_half.truncated(N), mu, K, y0,
                                 constrained)
            _assert_dominated(checks, ("welding", mu, K, N, kind, constrained), info)
            worst = max(worst, float(info["max_err_over_bound"]))
            n_checks += len(checks)
        assert constrained_count == 15
        info.pop("max_err_over_bound")
        info.update(triples="30+30", inequalities=n_checks, max_err_over_bound=_g(worst))


# ------------------------------------------------------------------ 2. oracles

def test_c02_oracle_equivalence():
    with criterion("C2", "optimizers match dense oracles") as info:
        rng = np.random.default_rng(202)
        worst = 0.0
        for i in range(20):
            n, K, m = int(rng.integers(2, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 3))
            model, _ = random_model(rng, n, m)
            spec = random_spec(rng, K, m)
            y0 = rng.standard_normal(n)
            sol = ocp.solve_ocp(spec, model, y0, ocp.SolverOptions(tol_abs=1e-14, tol_rel=1e-12))
            ref = unconstrained_optimum(model, spec, y0)
            err = spec.u_norm(sol.u - ref) / max(1.0, spec.u_norm(ref))
            assert err <= 1e-8, ("unconstrained", i, err)
            worst = max(worst, err)
        for i in range(20):
            K, m = [(1, 1), (2, 1), (3, 1), (4, 1), (1, 2), (2, 2)][i % 6]
            model, _ = random_model(rng, 3, m)
            spec = random_spec(rng, K, m, bounds=(-0.3, 0.2), constrained=True)
            y0 = 3 * rng.standard_normal(3)
            sol = ocp.solve_ocp(spec, model, y0, ocp.SolverOptions(tol_abs=1e-14, tol_rel=1e-12))
            ref, _ = exhaustive_active_set(model, spec, y0)
            err = spec.u_norm(sol.u - ref) / max(1.0, spec.u_norm(ref))
            assert err <= 1e-8, ("constrained", i, err)
            worst = max(worst, err)
        info.update(instances="20+20", max_rel_err=_g(worst))


# ------------------------------------------------------------------ 3. gradient

def test_c03_gradient_check(problem_1d_small, problem_welding_small):
    with criterion("C3", "adjoint gradient vs central differences") as info:
        rng = np.random.default_rng(303)
        worst = 0.0
        cases = [(problem_1d_small, [rng.uniform(1, 15), 10.0 ** -rng.integers(1, 5)], 10)
                 for _ in range(3)]
        cases += [(problem_welding_small, [rng.uniform(0.5, 2), 10 ** rng.uniform(-6, -4)], 8)
                  for _ in range(2)]
        for problem, mu, K in cases:
            model = problem.truth_model(mu)
            spec = problem.ocp_spec(mu, K)
            y0 = rng.uniform(0, 1, problem.space.n_dofs)
            u = rng.standard_normal((K + 1, model.m))
            u[0] = 0
            g = ocp.eval_gradient(spec, model, u, y0)
            J = lambda v: ocp.eval_cost(spec, model, ocp.solve_state(model, spec, v, y0), v)
            for _ in range(5):
                d = rng.standard_normal(u.shape)
                d[0] = 0
                h = 1e-4
                fd = (J(u + h * d) - J(u - h * d)) / (2 * h)
                ana = spec.u_inner(g, d)
                err = abs(fd - ana) / max(abs(ana), 1e-12)
                assert err <= 1e-5, (mu, err)
                worst = max(worst, err)
        info.update(instances=5, directions=5, max_rel_err=_g(worst))


# ------------------------------------------------------------------ 4. stability threshold

def test_c04_stability_threshold(problem_1d):
    with criterion("C4", "uncontrolled stability threshold") as info:
        y0 = problem_1d.initial_condition()
        for mu1, sign in ((2.0, -1), (3.0, 1)):
            y = apply_to_plant(problem_1d, y0, np.zeros((100, 1)), [mu1, 1e-2])
            norms = np.array([problem_1d.l2_norm(v) for v in y])
            tail = np.diff(norms[-51:])
            assert np.all(sign * tail > 0), (mu1, tail)
            assert sign * (norms[-1] - norms[0]) > 0
            info[f"ratio_mu1_{mu1:g}"] = _g(norms[-1] / norms[0])


# ------------------------------------------------------------------ 5. suboptimality curves

def test_c05_suboptimality_sign_change(problem_1d, bundles_1d):
    with criterion("C5", "suboptimality sign pattern") as info:
        y_init = problem_1d.initial_condition()
        mu = np.array([14.0, 1e-2])
        y0 = closed_loop_state(problem_1d, y_init, mu, 1, 20, 10)
        solver = ReducedSolver(bundles_1d[1e-2].truncated(9))
        fe = {K: fe_mpc_step(problem_1d, y0, mu, K, 1).omega for K in (6, 7)}
        rb = {K: rb_suboptimality(solver, problem_1d, y0, mu, K, 1).omega for K in (6, 7)}
        info.update(fe6=_g(fe[6]), fe7=_g(fe[7]), rb6=_g(rb[6]), rb7=_g(rb[7]))
        assert fe[6] <= 0 < fe[7]
        assert rb[6] <= 0 < rb[7]
        mu = np.array([8.0, 1e-4])
        y0 = closed_loop_state(problem_1d, y_init, mu, 1, 20, 10)
        omegas = [fe_mpc_step(problem_1d, y0, mu, K, 1).omega for K in range(1, 21)]
        info["min_omega_8_1e-4"] = _g(min(omegas))
        assert min(omegas) > 0


# ------------------------------------------------------------------ 6 + 7. minimal horizons

@pytest.fixture(scope="module")
def horizon_runs(problem_1d, bundles_1d):
    y0 = problem_1d.initial_condition()
    runs = {}
    for mu1 in (2.0, 8.0, 11.0, 14.0):
        for lam in LAMBDAS:
            cfg = MPCConfig(mu=(mu1, lam), n=1, K_max=20, loops=100)
            runs[(mu1, lam, "FE")] = fe_mpc(problem_1d, y0, cfg)
            runs[(mu1, lam, "N9")] = adaptive_rb_mpc(bundles_1d[lam].truncated(9), problem_1d, y0, cfg)
    return runs


def test_c06_minimal_horizons(horizon_runs):
    with criterion("C6", "minimal stabilizing horizons") as info:
        K = {key: tr.K_ave for key, tr in horizon_runs.items()}
        for lam in LAMBDAS:
            assert K[(2.0, lam, "FE")] == 1.0 and K[(2.0, lam, "N9")] == 1.0, lam
        for mu1 in (8.0, 11.0, 14.0):
            for label in ("FE", "N9"):
                seq = [K[(mu1, lam, label)] for lam in LAMBDAS]
                info[f"{label}_{mu1:g}"] = "/".join(f"{k:.3g}" for k in seq)
                assert all(b <= a for a, b in zip(seq, seq[1:])), (mu1, label, seq)
            for lam in LAMBDAS:
                assert K[(mu1, lam, "N9")] <= K[(mu1, lam, "FE")] + 2, (mu1, lam)


def test_c07_certified_descent(problem_1d, horizon_runs):
    with criterion("C7", "certified descent verified with truth solves") as info:
        checks = []
        for (mu1, lam, label), trace in horizon_runs.items():
            if label != "N9":
                continue
            checks += verify_descent(problem_1d, trace, [mu1, lam], False, range(0, 100, 10))
        bad = descent_violations(checks)
        info.update(checked_loops=len(checks), violations=len(bad))
        assert len(checks) >= 100 and not bad, bad[:3]


# ------------------------------------------------------------------ 8. omega_min effect

def test_c08_omega_min_effect(problem_welding_half, bundle_welding_half):
    with criterion("C8", "omega_min raises the horizon") as info:
        y0 = problem_welding_half.initial_condition()
        loops = preset_config("welding-2d", 0.5).loops()
        compared = 0
        for mu in ((0.75, 2e-6), (1.75, 5e-6)):
            for N in (66, 82):
                bundle = bundle_welding_half.truncated(N)
                for constrained in (False, True):
                    K = []
                    for om in (0.0, 0.2):
                        cfg = MPCConfig(mu=mu, n=5, K_max=75, omega_min=om, loops=loops,
                                        constrained=constrained)
                        K.append(adaptive_rb_mpc(bundle, problem_welding_half, y0, cfg).K_ave)
                    info[f"{mu[0]:g}/{mu[1]:g}/N{N}/c{int(constrained)}"] = f"{K[0]:.3g}->{K[1]:.3g}"
                    assert K[1] >= K[0], (mu, N, constrained, K)
                    compared += 1
        assert compared == 8


# ------------------------------------------------------------------ 9. convergence

def test_c09_convergence_trend(problem_1d, bundles_1d, problem_welding_half, bundle_welding_half):
    with criterion("C9", "bound decay with N") as info:
        y0 = problem_1d.initial_condition()
        mu1 = np.linspace(1, 15, 30)
        first = last = 0.0
        for lam in LAMBDAS:
            test = np.column_stack([mu1, np.full(30, lam)])
            rows = effectivity_study(problem_1d, bundles_1d[lam], test, [1, 9], 20, y0)
            assert all(r.violations == 0 for r in rows)
            first = max(first, rows[0].cost_bound_max)
            last = max(last, rows[1].cost_bound_max)
        info.update(cost_N1=_g(first), cost_N9=_g(last))
        assert first >= 1e3 * last
        test = preset_config("welding-2d", 0.5).test_set()
        rows = effectivity_study(problem_welding_half, bundle_welding_half, test,
                                 [WELDING_N[0], WELDING_N[-1]], 75, problem_welding_half.initial_condition())
        assert all(r.violations == 0 for r in rows)
        info.update(control_N2=_g(rows[0].control_bound_max), control_N82=_g(rows[1].control_bound_max))
        assert rows[0].control_bound_max >= 1e2 * rows[1].control_bound_max


# ------------------------------------------------------------------ 10. shift transformation

def test_c10_garding_equivalence():
    with criterion("C10", "shift transformation equivalence") as info:
        problem = Problem(definition_1d(50))
        assert problem.space.n_dofs <= 50
        rng = np.random.default_rng(1010)
        y0 = problem.initial_condition()
        opts = ocp.SolverOptions(tol_abs=1e-14, tol_rel=1e-13)
        worst_u = worst_J = 0.0
        for _ in range(10):
            mu = [rng.uniform(3, 15), 10 ** rng.uniform(-4, -1)]
            K = int(rng.integers(2, 21))
            spec = problem.ocp_spec(mu, K)
            direct = ocp.kkt_direct_solve(spec, problem.truth_model(mu), y0)
            hat, _, g, _ = problem.solve_truth(mu, K, y0, options=opts)
            assert g.delta > 0
            back = garding.untransform_solution(hat, g)
            eu = spec.u_norm(back.u - direct.u) / spec.u_norm(direct.u)
            eJ = abs(hat.J - direct.J) / abs(direct.J)
            assert eu <= 1e-9 and eJ <= 1e-10, (mu, K, eu, eJ)
            worst_u, worst_J = max(worst_u, eu), max(worst_J, eJ)
        info.update(instances=10, max_control_err=_g(worst_u), max_cost_err=_g(worst_J))


# ------------------------------------------------------------------ 11. timing

def test_c11_timing_ordering():
    with criterion("C11", "online speed-up at full welding scale") as info:
        problem = Problem(definition_welding())
        cfg = GreedyConfig(training=welding_training(5, 10), N_max=66, K_train=75,
                           indicator="control", tol=1e-14, first_mu=(0.5, 1e-6))
        bundle = pod_greedy(problem, cfg)
        y0 = problem.initial_condition()
        mu = np.array([1.75, 2e-6])
        fe = time_call(lambda: fe_mpc_step(problem, y0, mu, 10, 5), 3)
        info.update(n_truth=problem.space.n_dofs, fe_seconds=_g(fe))
        worst = math.inf
        for N in [n for n in WELDING_N if n <= 66]:
            solver = ReducedSolver(bundle.truncated(min(N, bundle.N)))
            rb_suboptimality(solver, problem, y0, mu, 10, 5)
            t = time_call(lambda: rb_suboptimality(solver, problem, y0, mu, 10, 5), 5)
            worst = min(worst, fe / t)
            info[f"speedup_N{N}"] = f"{fe / t:.3g}"
        assert bundle.N >= 66 and worst >= 5.0


# ------------------------------------------------------------------ 12. offline-online fidelity

def test_c12_residual_norm_fidelity(problem_1d_small, small_bundle_1d, problem_welding_small):
    with criterion("C12", "residual dual norms vs direct Riesz") as info:
        welding_bundle = pod_greedy(problem_welding_small, GreedyConfig(
            training=welding_training(3, 4), N_max=12, K_train=10, indicator="control", tol=1e-14,
            first_mu=(0.5, 1e-6)))
        rng = np.random.default_rng(1212)
        worst = 0.0
        cases = 0
        for problem, bundle, draw in (
                (problem_1d_small, small_bundle_1d, lambda: [rng.uniform(1, 15), 10.0 ** -rng.integers(1, 5)]),
                (problem_welding_small, welding_bundle,
                 lambda: [rng.uniform(0.5, 2), 10 ** rng.uniform(-6, -4)])):
            assert problem.space.n_dofs <= 100
            for i in range(25):
                mu = draw()
                sub = bundle.truncated(int(rng.integers(1, bundle.N + 1)))
                y0 = rng.uniform(-1, 1, problem.space.n_dofs)
                res = ReducedSolver(sub).solve_from_truth(mu, int(rng.integers(1, 16)), y0,
                                                          constrained=bool(i % 2) and problem.bounds is not None)
                ry, rp = direct_residual_norms(problem, sub, res, mu)
                for got, ref in ((res.bounds.norms.ry, ry), (res.bounds.norms.rp, rp)):
                    scale = max(ref.max(), 1e-300)
                    err = np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-8 * scale))
                    assert err <= 1e-8, (mu, sub.N, err)
                    worst = max(worst, err)
                cases += 1
        info.update(cases=cases, max_rel_err=_g(worst))
