"""Numerical studies behind the report tables: effectivities, horizons, timing, suboptimality."""

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from .estimators import compare_with_truth
from .garding import untransform_controls
from .mpc import (MPCConfig, adaptive_rb_mpc, fe_mpc, fe_mpc_step, rb_suboptimality,
                  apply_to_plant, stage_cost)
from .rb import ReducedSolver, project_initial


class DomainError(ValueError):
    """A parameter lies outside every trained domain."""


# ------------------------------------------------------------------ bundles

def training_box(training):
    t = np.atleast_2d(np.asarray(training, dtype=float))
    return t.min(axis=0).tolist(), t.max(axis=0).tolist()


def select_bundle(bundles, mu, rtol=1e-9):
    """Name of the first bundle whose training box contains ``mu``."""
    mu = np.asarray(mu, dtype=float)
    for name, b in bundles.items():
        lo = np.asarray(b.meta.get("training_lower", [-np.inf] * mu.size))
        hi = np.asarray(b.meta.get("training_upper", [np.inf] * mu.size))
        slack = rtol * np.maximum(np.abs(lo), np.abs(hi))
        if lo.shape == mu.shape and np.all(mu >= lo - slack) and np.all(mu <= hi + slack):
            return name
    boxes = {n: (b.meta.get("training_lower"), b.meta.get("training_upper")) for n, b in bundles.items()}
    raise DomainError(f"parameter {mu.tolist()} lies outside every trained domain {boxes}")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(x) for x in r])


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


# ------------------------------------------------------------------ effectivities

@dataclass
class EffectivityRow:
    basis: str
    N: int
    samples: int
    cost_err_max: float
    cost_bound_max: float
    cost_eta_ave: float
    cost_eta_min: float
    control_err_max: float
    control_bound_max: float
    control_eta_ave: float
    control_eta_min: float
    violations: int

    HEADER = ("basis", "N", "samples", "cost_err_max_rel", "cost_bound_max_rel", "cost_eta_ave",
              "cost_eta_min", "control_err_max_rel", "control_bound_max_rel", "control_eta_ave",
              "control_eta_min", "violations")

    def as_list(self):
        return [self.basis, self.N, self.samples, self.cost_err_max, self.cost_bound_max,
                self.cost_eta_ave, self.cost_eta_min, self.control_err_max, self.control_bound_max,
                self.control_eta_ave, self.control_eta_min, self.violations]


def effectivity_study(problem, bundle, test_set, N_values, K, y0, constrained=False,
                      basis="rb", options=None):
    """Relative errors, bounds and effectivities of the cost and the control over a test set.

    Control quantities are measured in original variables; cost quantities are
    invariant under the shift transformation. Effectivities are averaged over
    samples with a nonzero true error.
    """
    truths = []
    for mu in test_set:
        sol, spec, g, model = problem.solve_truth(mu, K, y0, constrained, options=options)
        truths.append((mu, sol, spec, g, model))
    rows = []
    for N in N_values:
        sub = bundle.truncated(N)
        solver = ReducedSolver(sub, options)
        ybar0, R0 = project_initial(sub, y0)
        stats = {"ce": [], "cb": [], "ceta": [], "ue": [], "ub": [], "ueta": []}
        bad = 0
        for mu, sol, spec, g, model in truths:
            res = solver.solve(mu, K, ybar0, R0, constrained)
            J = abs(sol.J)
            dJ = res.bounds.delta_J(constrained)
            cerr = sol.J - res.J
            if constrained:
                bad += cerr > dJ * (1 + 1e-9) + 1e-14
            else:
                bad += abs(cerr) > dJ * (1 + 1e-9) + 1e-14
            u_true = untransform_controls(sol.u, g)
            u_rb = untransform_controls(res.solution.u, res.garding)
            unorm = max(spec.u_norm(u_true), 1e-300)
            uerr = spec.u_norm(u_true - u_rb)
            du = res.bounds.delta_u_original
            bad += uerr > du * (1 + 1e-9) + 1e-14
            stats["ce"].append(abs(cerr) / max(J, 1e-300))
            stats["cb"].append(dJ / max(J, 1e-300))
            stats["ue"].append(uerr / unorm)
            stats["ub"].append(du / unorm)
            if abs(cerr) > 1e-14 * max(J, 1.0):
                stats["ceta"].append(dJ / abs(cerr))
            if uerr > 1e-14 * unorm:
                stats["ueta"].append(du / uerr)
        rows.append(EffectivityRow(
            basis, N, len(truths), max(stats["ce"]), max(stats["cb"]), _mean(stats["ceta"]),
            _min(stats["ceta"]), max(stats["ue"]), max(stats["ub"]), _mean(stats["ueta"]),
            _min(stats["ueta"]), int(bad)))
    return rows


def _mean(v):
    return float(np.mean(v)) if v else math.nan


def _min(v):
    return float(np.min(v)) if v else math.nan


# ------------------------------------------------------------------ truth-side rigor

def rigor_check(problem, bundle, mu, K, y0, constrained=False, options=None):
    """Every bound against its truth-computed error; returns a list of (name, error, bound)."""
    sol, spec, g, model = problem.solve_truth(mu, K, y0, constrained, options=options)
    res = ReducedSolver(bundle, options).solve_from_truth(mu, K, y0, constrained)
    rep = res.bounds
    cmp_ = compare_with_truth(model, spec, sol, bundle.Z, res.solution)
    u_true = untransform_controls(sol.u, g)
    uerr_orig = spec.u_norm(u_true - untransform_controls(res.solution.u, res.garding))
    out = [("control_hat", cmp_.control_error, rep.delta_u),
           ("control", uerr_orig, rep.delta_u_original),
           ("initial", cmp_.initial_error, rep.R0)]
    out += [(f"state[{k + 1}]", e, b) for k, (e, b) in enumerate(zip(cmp_.state_energy, rep.delta_y))]
    out += [(f"adjoint[{k + 1}]", e, b) for k, (e, b) in enumerate(zip(cmp_.adjoint_energy, rep.delta_p))]
    if constrained:
        out.append(("cost_one_sided", cmp_.cost_error, rep.delta_J_c))
    else:
        out.append(("cost", abs(cmp_.cost_error), rep.delta_J_uc))
    return out


# ------------------------------------------------------------------ MPC horizon tables

@dataclass
class HorizonRow:
    mu: tuple
    label: str
    constrained: bool
    omega_min: float
    K_ave: float
    flagged: int
    closed_loop_cost: float
    final_norm: float
    final_output: float
    seconds: float

    HEADER = ("mu", "controller", "constrained", "omega_min", "K_ave", "kmax_loops",
              "closed_loop_cost", "final_state_norm", "final_output", "seconds")

    def as_list(self):
        return [" ".join(repr(float(x)) for x in self.mu), self.label, int(self.constrained),
                self.omega_min, self.K_ave, self.flagged, self.closed_loop_cost, self.final_norm,
                self.final_output, self.seconds]


def horizon_run(problem, y0, mu, n, K_max, omega_min, loops, constrained, bundle=None,
                warm_start=False, options=None):
    """One MPC run; ``bundle=None`` runs the truth controller. Returns (trace, seconds)."""
    cfg = MPCConfig(mu=tuple(float(x) for x in mu), n=n, K_max=K_max, omega_min=omega_min,
                    loops=loops, constrained=constrained, warm_start=warm_start)
    t = time.perf_counter()
    if bundle is None:
        trace = fe_mpc(problem, y0, cfg, options)
    else:
        trace = adaptive_rb_mpc(bundle, problem, y0, cfg, options)
    return trace, time.perf_counter() - t


def horizon_row(mu, label, constrained, omega_min, trace, seconds):
    return HorizonRow(tuple(mu), label, constrained, omega_min, trace.K_ave, len(trace.flagged),
                      trace.closed_loop_cost, trace.state_norms[-1], trace.outputs[-1], seconds)


def verify_descent(problem, trace, mu, constrained, loop_indices, options=None, rtol=1e-9):
    """Truth check of J*(y0) >= J*(y_next) + omega * sum(l) on accepted loops.

    Returns a list of (loop, lhs, rhs) for every checked loop.
    """
    n = trace.n
    out = []
    for i in loop_indices:
        rec = trace.loops[i]
        if rec.status != "accepted":
            continue
        y_start = trace.states[i * n]
        y_next = trace.states[(i + 1) * n]
        t0 = rec.t
        J0 = problem.solve_truth(mu, rec.K, y_start, constrained, t0, options)[0].J
        J1 = problem.solve_truth(mu, rec.K, y_next, constrained, t0 + n * problem.tau, options)[0].J
        out.append((i, J0, J1 + rec.omega * rec.stage_cost))
    return out


def descent_violations(checks, rtol=1e-9):
    return [c for c in checks if c[1] < c[2] - rtol * max(abs(c[1]), abs(c[2]), 1e-300)]


# ------------------------------------------------------------------ suboptimality curves

def closed_loop_state(problem, y0, mu, n, K_max, loops, constrained=False, options=None):
    """State reached after ``loops`` truth-MPC loops (the start of a suboptimality curve)."""
    if loops == 0:
        return np.asarray(y0, dtype=float)
    trace, _ = horizon_run(problem, y0, mu, n, K_max, 0.0, loops, constrained, options=options)
    return np.asarray(trace.states[-1])


def suboptimality_curve(problem, y0, mu, K_values, n, bundles=(), constrained=False, options=None):
    """omega_K (truth) and omega_{N,K} for each (label, bundle); rows (K, fe, rb...)."""
    solvers = [(label, ReducedSolver(b, options)) for label, b in bundles]
    rows = []
    for K in K_values:
        if K < n:
            continue
        fe = fe_mpc_step(problem, y0, mu, K, n, constrained, 0.0, options).omega
        row = [K, fe]
        for _, s in solvers:
            row.append(rb_suboptimality(s, problem, y0, mu, K, n, constrained, 0.0).omega)
        rows.append(row)
    header = ["K", "omega_fe"] + [f"omega_{label}" for label, _ in bundles]
    return header, rows


# ------------------------------------------------------------------ timing

def time_call(fn, repeats):
    best = math.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def timing_study(problem, bundle, y0, mu, N_values, K_values, n, constrained=False, repeats=3,
                 options=None):
    """Wall time of one feedback-plus-certificate evaluation: FE row and one row per N.

    The RB time includes the truth-contact part (projection of the measured
    state and the plant steps), so the comparison is end to end.
    """
    rows = []
    fe = ["FE"]
    for K in K_values:
        fe.append(time_call(lambda: fe_mpc_step(problem, y0, mu, K, n, constrained, 0.0, options),
                            repeats))
    rows.append(fe)
    for N in N_values:
        solver = ReducedSolver(bundle.truncated(N), options)
        row = [str(N)]
        for K in K_values:
            rb_suboptimality(solver, problem, y0, mu, K, n, constrained)  # realize the model once
            row.append(time_call(lambda: rb_suboptimality(solver, problem, y0, mu, K, n, constrained),
                                 repeats))
        rows.append(row)
    return ["controller"] + [f"K={K}" for K in K_values], rows


def single_solve(problem, mu, K, y0, constrained, bundle=None, options=None):
    """One OCP (truth or reduced); returns a dict summary and the controls in original variables."""
    t = time.perf_counter()
    if bundle is None:
        sol, spec, g, _ = problem.solve_truth(mu, K, y0, constrained, options=options)
        u = untransform_controls(sol.u, g, K)
        info = {"J": sol.J, "iterations": sol.iterations}
    else:
        res = ReducedSolver(bundle, options).solve_from_truth(mu, K, y0, constrained)
        u = res.controls()
        b = res.bounds
        info = {"J": res.J, "iterations": res.solution.iterations, "delta_u": b.delta_u_original,
                "delta_J": b.delta_J(constrained), "R0": b.R0}
    info["seconds"] = time.perf_counter() - t
    states = apply_to_plant(problem, y0, u, mu)
    info["plant_cost"] = stage_cost(problem, mu, states, u)
    return info, u
