"""Receding-horizon loops: truth MPC and certified adaptive RB-MPC.

Both loops share :func:`run_mpc`; they differ only in how a candidate horizon
is evaluated. A candidate evaluation computes the feedback controls, advances
the plant (the truth model in original variables) by ``n`` steps and returns
the suboptimality estimate for that horizon.
"""

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .garding import GardingData, untransform_controls
from .ocp import running_cost
from .rb import ReducedSolver, project_initial

EQUILIBRIUM_TOL = 1e-14


@dataclass(frozen=True)
class MPCConfig:
    mu: tuple
    n: int = 1
    K_max: int = 20
    omega_min: float = 0.0
    loops: int = 100
    constrained: bool = False
    warm_start: bool = False

    def __post_init__(self):
        if not 1 <= self.n <= self.K_max:
            raise ValueError(f"need 1 <= n <= K_max, got n={self.n}, K_max={self.K_max}")
        if self.omega_min < 0:
            raise ValueError("omega_min must be nonnegative")
        if self.loops < 1:
            raise ValueError("at least one loop is required")


@dataclass
class Candidate:
    controls: np.ndarray     # (n, m), original variables
    states: np.ndarray       # (n + 1, N_truth) plant states y^0..y^n
    omega: float
    stage_cost: float        # sum_{k<n} l(y^k, u^{k+1})
    J_now: float = math.nan
    J_next: float = math.nan
    fast_seconds: float = 0.0
    truth_seconds: float = 0.0


@dataclass
class LoopRecord:
    loop: int
    t: float
    K: int
    omega: float
    status: str              # accepted | kmax | equilibrium
    stage_cost: float
    candidates: int
    fast_seconds: float
    truth_seconds: float
    J_now: float = math.nan
    J_next: float = math.nan


@dataclass
class MPCTrace:
    tau: float
    n: int
    loops: list = field(default_factory=list)
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    state_norms: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    step_K: list = field(default_factory=list)
    step_omega: list = field(default_factory=list)

    @property
    def K_ave(self):
        return float(np.mean([r.K for r in self.loops])) if self.loops else math.nan

    @property
    def closed_loop_cost(self):
        return float(sum(r.stage_cost for r in self.loops))

    @property
    def flagged(self):
        return [r for r in self.loops if r.status == "kmax"]

    def write_steps_csv(self, path):
        m = len(self.controls[0]) if self.controls else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "state_l2_norm", "output"] + [f"u{i + 1}" for i in range(m)] + ["K", "omega"])
            for i, t in enumerate(self.times):
                u = self.controls[i] if i < len(self.controls) else [math.nan] * m
                K = self.step_K[i] if i < len(self.step_K) else ""
                om = self.step_omega[i] if i < len(self.step_omega) else math.nan
                w.writerow([_fmt(t), _fmt(self.state_norms[i]), _fmt(self.outputs[i])]
                           + [_fmt(x) for x in u] + [K, _fmt(om)])

    def write_loops_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["loop", "t", "K", "omega", "status", "stage_cost", "candidates",
                        "fast_seconds", "truth_seconds"])
            for r in self.loops:
                w.writerow([r.loop, _fmt(r.t), r.K, _fmt(r.omega), r.status, _fmt(r.stage_cost),
                            r.candidates, f"{r.fast_seconds:.6f}", f"{r.truth_seconds:.6f}"])


def _fmt(x):
    return repr(float(x))


# ------------------------------------------------------------------ plant

def plant_model(problem, mu):
    return problem.transformed_model(mu, GardingData(0.0, problem.tau, 1))


def apply_to_plant(problem, y, controls, mu):
    """Advance the truth plant ``len(controls)`` backward-Euler steps; rows y^0..y^n."""
    model = plant_model(problem, mu)
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    rhs = problem.tau * (controls @ model.B.T)
    return model.stepper(problem.tau).forward(np.asarray(y, dtype=float), rhs)


def stage_cost(problem, mu, states, controls, t0=0.0):
    """Sum over k < n of l(y^k, u^{k+1}) in original variables."""
    n = len(controls)
    spec = problem.ocp_spec(mu, n, t0=t0)
    model = plant_model(problem, mu)
    return sum(running_cost(spec, model, states[k], controls[k], k) for k in range(n))


# ------------------------------------------------------------------ candidates

def fe_mpc_step(problem, y0, mu, K, n, constrained=False, t0=0.0, options=None):
    """Truth feedback for horizon K and the truth suboptimality estimate."""
    if K < n:
        raise ValueError("horizon K must be at least n")
    t = time.perf_counter()
    sol, _, g, _ = problem.solve_truth(mu, K, y0, constrained, t0, options)
    u = untransform_controls(sol.u, g, n)
    states = apply_to_plant(problem, y0, u, mu)
    l_sum = stage_cost(problem, mu, states, u, t0)
    sol2, _, _, _ = problem.solve_truth(mu, K, states[-1], constrained, t0 + n * problem.tau, options)
    omega = (sol.J - sol2.J) / l_sum if l_sum >= EQUILIBRIUM_TOL else math.nan
    return Candidate(u, states, omega, l_sum, sol.J, sol2.J, 0.0, time.perf_counter() - t)


def rb_suboptimality(solver, problem, y0, mu, K, n, constrained=False, t0=0.0):
    """RB feedback for horizon K and its certified suboptimality estimate."""
    if K < n:
        raise ValueError("horizon K must be at least n")
    bundle = solver.bundle
    t = time.perf_counter()
    ybar0, R0 = project_initial(bundle, y0)
    truth = time.perf_counter() - t
    t = time.perf_counter()
    res = solver.solve(mu, K, ybar0, R0, constrained, t0)
    res_uc = solver.solve(mu, K, ybar0, R0, False, t0) if constrained else res
    u = res.controls(n)
    fast = time.perf_counter() - t
    t = time.perf_counter()
    states = apply_to_plant(problem, y0, u, mu)
    l_sum = stage_cost(problem, mu, states, u, t0)
    ybar1, R01 = project_initial(bundle, states[-1])
    truth += time.perf_counter() - t
    t = time.perf_counter()
    res2 = solver.solve(mu, K, ybar1, R01, constrained, t0 + n * problem.tau)
    lower = res_uc.J - res_uc.bounds.delta_J_uc
    upper = res2.J + res2.bounds.delta_J(constrained)
    omega = (lower - upper) / l_sum if l_sum >= EQUILIBRIUM_TOL else math.nan
    fast += time.perf_counter() - t
    return Candidate(u, states, omega, l_sum, lower, upper, fast, truth)


# ------------------------------------------------------------------ loops

def run_mpc(problem, y0, config, evaluate):
    """Generic adaptive-horizon loop; ``evaluate(y, K, t0)`` returns a :class:`Candidate`."""
    trace = MPCTrace(problem.tau, config.n)
    y = np.asarray(y0, dtype=float)
    t = 0.0
    _record_state(trace, problem, t, y)
    K_start = config.n
    for loop in range(config.loops):
        K = K_start
        fast = truth = 0.0
        count = 0
        while True:
            cand = evaluate(y, K, t)
            count += 1
            fast += cand.fast_seconds
            truth += cand.truth_seconds
            if cand.stage_cost < EQUILIBRIUM_TOL:
                status = "equilibrium"
                break
            # omega above 1 is reported raw; the acceptance test uses min(omega, 1)
            if min(cand.omega, 1.0) > config.omega_min:
                status = "accepted"
                break
            if K >= config.K_max:
                status = "kmax"
                break
            K += 1
        trace.loops.append(LoopRecord(loop, t, K, cand.omega, status, cand.stage_cost, count,
                                      fast, truth, cand.J_now, cand.J_next))
        for k in range(config.n):
            trace.controls.append(cand.controls[k].tolist())
            trace.step_K.append(K)
            trace.step_omega.append(cand.omega)
            t += problem.tau
            _record_state(trace, problem, t, cand.states[k + 1])
        y = cand.states[-1]
        if config.warm_start:
            K_start = max(config.n, K - 1)
    return trace


def _record_state(trace, problem, t, y):
    trace.times.append(t)
    trace.states.append(y)
    trace.state_norms.append(problem.l2_norm(y))
    trace.outputs.append(problem.output(y))


def fe_mpc(problem, y0, config, options=None):
    mu = problem.domain.check(config.mu)
    return run_mpc(problem, y0, config, lambda y, K, t0: fe_mpc_step(
        problem, y, mu, K, config.n, config.constrained, t0, options))


def adaptive_rb_mpc(bundle, problem, y0, config, options=None):
    mu = problem.domain.check(config.mu)
    solver = ReducedSolver(bundle, options)
    return run_mpc(problem, y0, config, lambda y, K, t0: rb_suboptimality(
        solver, problem, y, mu, K, config.n, config.constrained, t0))
