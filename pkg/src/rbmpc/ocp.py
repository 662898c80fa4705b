"""Discrete finite-horizon optimal control: sweeps, cost, gradient, BFGS and PDAS.

Conventions used throughout: arrays indexed by the time step have ``K + 1``
rows. ``y[0]`` is the initial state, ``u[0]`` and ``p[0]`` are unused padding
rows kept at zero so that ``u[k]``, ``p[k]`` match the step index.

The control space carries the inner product ``(u, v)_U = tau * sum_k u^k . v^k``
and every gradient returned here is the Riesz representative in that product.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DENSE_LIMIT = 400


class SingularSystemError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    """Raised when an iteration cap is hit; ``solution`` holds the last iterate."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class SolverOptions:
    tol_abs: float = 1e-10
    tol_rel: float = 1e-8
    max_iter: int = 500
    pdas_max_iter: int = 20
    stall_iter: int = 10


@dataclass(frozen=True, eq=False)
class OCPSpec:
    """Weights and data of one finite-horizon problem.

    ``sigma1[k]`` weighs the tracking term of ``y^k`` (index 0 is used only by
    the running cost), ``lam[k]`` the control ``u^k`` (``lam[0]`` mirrors
    ``lam[1]``). ``theta_yd[k]`` are the desired-state coefficients at ``t^k``.
    """

    K: int
    tau: float
    sigma1: np.ndarray
    sigma2: float
    lam: np.ndarray
    theta_yd: np.ndarray
    ud: np.ndarray
    lower: np.ndarray = None
    upper: np.ndarray = None
    constrained: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("horizon K must be at least 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if np.any(self.sigma1 < 0) or self.sigma2 < 0:
            raise ValueError("tracking weights must be nonnegative")
        if np.any(self.lam[1:] <= 0):
            raise ValueError("lambda must be positive")
        for name in ("sigma1", "lam", "theta_yd", "ud"):
            if getattr(self, name).shape[0] != self.K + 1:
                raise ValueError(f"{name} needs K + 1 rows")
        if self.constrained:
            if self.lower is None or self.upper is None:
                raise ValueError("constrained problem needs bounds")
            if np.any(self.lower > self.upper):
                raise ValueError("lower bound exceeds upper bound")

    @classmethod
    def uniform(cls, K, tau, sigma1, sigma2, lam, theta_yd=(), ud=0.0, n_controls=1,
                bounds=None, constrained=False):
        """Time-invariant weights; ``theta_yd`` is one coefficient row or ``(K+1, Q)``."""
        K = int(K)
        th = np.asarray(theta_yd, dtype=float)
        if th.ndim <= 1:
            th = np.tile(th.reshape(1, -1), (K + 1, 1))
        ud_arr = np.broadcast_to(np.asarray(ud, dtype=float), (K + 1, n_controls)).copy()
        lo = hi = None
        if bounds is not None:
            lo = np.broadcast_to(np.asarray(bounds[0], dtype=float), (K + 1, n_controls)).copy()
            hi = np.broadcast_to(np.asarray(bounds[1], dtype=float), (K + 1, n_controls)).copy()
        return cls(K, float(tau), np.full(K + 1, float(sigma1)), float(sigma2),
                   np.full(K + 1, float(lam)), th, ud_arr, lo, hi, bool(constrained))

    @property
    def n_controls(self):
        return self.ud.shape[1]

    def state_weights(self):
        """Coefficients c_k of 1/2 |y^k - y_d^k|_D^2 in J; c_0 = 0."""
        c = self.tau * self.sigma1.copy()
        c[0] = 0.0
        c[-1] += self.sigma2
        return c

    def u_inner(self, a, b):
        return self.tau * float(np.sum(a[1:] * b[1:]))

    def u_norm(self, a):
        return float(np.sqrt(max(self.u_inner(a, a), 0.0)))

    def with_constraints(self, flag):
        return replace(self, constrained=bool(flag))


class DiscreteModel:
    """Matrices of one realized (truth or reduced) linear-quadratic model.

    ``A`` is the full spatial operator for the parameter at hand. ``yd`` holds
    the D-weighted desired-state component vectors (Q x n) and ``ydd`` their
    cross products, so that ``|y - y_d|_D^2 = y.Dy - 2 Yd.y + ydd``.
    """

    def __init__(self, M, A, B, D, yd=None, ydd=None):
        n = M.shape[0]
        dense = (not sp.issparse(M)) or n <= DENSE_LIMIT
        conv = (lambda X: X.toarray() if sp.issparse(X) else np.asarray(X, dtype=float)) if dense \
            else (lambda X: sp.csr_matrix(X))
        self.dense = dense
        self.M, self.A, self.D = conv(M), conv(A), conv(D)
        self.B = np.asarray(B.toarray() if sp.issparse(B) else B, dtype=float).reshape(n, -1)
        self.yd = np.zeros((0, n)) if yd is None else np.asarray(yd, dtype=float).reshape(-1, n)
        q = self.yd.shape[0]
        self.ydd = np.zeros((q, q)) if ydd is None else np.asarray(ydd, dtype=float).reshape(q, q)
        self._steppers = {}

    @property
    def n(self):
        return self.M.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def stepper(self, tau):
        st = self._steppers.get(tau)
        if st is None:
            st = _DenseStepper(self, tau) if self.dense else _SparseStepper(self, tau)
            self._steppers[tau] = st
        return st

    def apply_D(self, Y):
        """Rows of ``Y`` mapped by D."""
        return Y @ self.D if self.dense else (self.D @ Y.T).T

    def desired(self, theta):
        """Per-step D-weighted desired vectors and squared norms for coefficient rows ``theta``."""
        theta = np.asarray(theta, dtype=float)
        if self.yd.shape[0] == 0:
            return np.zeros((theta.shape[0], self.n)), np.zeros(theta.shape[0])
        vec = theta @ self.yd
        sq = np.einsum("kp,pq,kq->k", theta, self.ydd, theta)
        return vec, sq


class _DenseStepper:
    def __init__(self, model, tau):
        lhs = model.M + tau * model.A
        try:
            lu = sla.lu_factor(lhs, check_finite=False)
        except (sla.LinAlgError, ValueError) as exc:
            raise SingularSystemError(str(exc)) from exc
        if np.any(np.abs(np.diag(lu[0])) == 0):
            raise SingularSystemError("M + tau A is singular")
        S = sla.lu_solve(lu, np.eye(model.n), check_finite=False)
        self.S, self.SM = S, S @ model.M
        self.ST, self.STM = S.T.copy(), S.T @ model.M

    def forward(self, y0, rhs):
        srhs = rhs @ self.S.T
        Y = np.empty((rhs.shape[0] + 1, y0.shape[0]))
        Y[0] = y0
        SM = self.SM
        for k in range(rhs.shape[0]):
            Y[k + 1] = SM @ Y[k] + srhs[k]
        return Y

    def backward(self, w):
        sw = w @ self.S
        P = np.empty_like(w)
        P[-1] = sw[-1]
        STM = self.STM
        for k in range(w.shape[0] - 2, -1, -1):
            P[k] = STM @ P[k + 1] + sw[k]
        return P


class _SparseStepper:
    def __init__(self, model, tau):
        try:
            self.lu = spla.splu((model.M + tau * model.A).tocsc())
        except RuntimeError as exc:
            raise SingularSystemError(str(exc)) from exc
        self.M = model.M

    def forward(self, y0, rhs):
        Y = np.empty((rhs.shape[0] + 1, y0.shape[0]))
        Y[0] = y0
        for k in range(rhs.shape[0]):
            Y[k + 1] = self.lu.solve(self.M @ Y[k] + rhs[k])
        return Y

    def backward(self, w):
        P = np.empty_like(w)
        P[-1] = self.lu.solve(w[-1], trans="T")
        for k in range(w.shape[0] - 2, -1, -1):
            P[k] = self.lu.solve(self.M @ P[k + 1] + w[k], trans="T")
        return P


@dataclass
class TrajectorySolution:
    y: np.ndarray
    p: np.ndarray
    u: np.ndarray
    J: float
    iterations: int = 0
    pdas_iterations: int = 0
    grad_norm: float = 0.0
    converged: bool = True
    stalled: bool = False
    lower_active: np.ndarray = None
    upper_active: np.ndarray = None
    history: list = field(default_factory=list)


# ---------------------------------------------------------------- sweeps

def _check(model, spec, u=None, y0=None):
    if u is not None and u.shape != (spec.K + 1, model.m):
        raise ValueError(f"control must have shape {(spec.K + 1, model.m)}, got {u.shape}")
    if y0 is not None and y0.shape != (model.n,):
        raise ValueError(f"initial state must have length {model.n}")


def solve_state(model, spec, u, y0):
    """Backward-Euler state sweep; returns y of shape (K+1, n) with y[0] = y0."""
    u = np.asarray(u, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    _check(model, spec, u, y0)
    rhs = spec.tau * (u[1:] @ model.B.T)
    return model.stepper(spec.tau).forward(y0, rhs)


def state_response(model, spec, d):
    """State driven by control ``d`` from a zero initial state."""
    return solve_state(model, spec, d, np.zeros(model.n))


def adjoint_sources(model, spec, y):
    yd_vec, _ = model.desired(spec.theta_yd)
    c = spec.state_weights()
    return c[1:, None] * (yd_vec[1:] - model.apply_D(y[1:]))


def solve_adjoint(model, spec, y):
    """Backward adjoint sweep; returns p of shape (K+1, n) with p[0] = 0."""
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.K + 1, model.n):
        raise ValueError("state trajectory must have K + 1 rows")
    p = np.zeros_like(y)
    p[1:] = model.stepper(spec.tau).backward(adjoint_sources(model, spec, y))
    return p


def tracking_terms(model, spec, y):
    """|y^k - y_d^k|_D^2 for k = 0..K via the expanded representation."""
    yd_vec, yd_sq = model.desired(spec.theta_yd)
    Dy = model.apply_D(y)
    return np.einsum("kn,kn->k", y, Dy) - 2.0 * np.einsum("kn,kn->k", yd_vec, y) + yd_sq


def eval_cost(spec, model, y, u):
    c = spec.state_weights()
    track = float(0.5 * np.dot(c, tracking_terms(model, spec, y)))
    du = u[1:] - spec.ud[1:]
    ctrl = 0.5 * spec.tau * float(np.sum(spec.lam[1:, None] * du * du))
    return track + ctrl


def gradient_from_adjoint(spec, model, u, p):
    g = np.zeros_like(u)
    g[1:] = spec.lam[1:, None] * (u[1:] - spec.ud[1:]) - p[1:] @ model.B
    return g


def eval_gradient(spec, model, u, y0):
    """U-gradient lambda (u - u_d) - B* p(y(u)) as a (K+1, m) array, row 0 zero."""
    u = np.asarray(u, dtype=float)
    y = solve_state(model, spec, u, y0)
    p = solve_adjoint(model, spec, y)
    return gradient_from_adjoint(spec, model, u, p)


def _curvature(spec, model, d, yresp):
    c = spec.state_weights()
    Dy = model.apply_D(yresp)
    q = float(np.dot(c, np.einsum("kn,kn->k", yresp, Dy)))
    return q + spec.tau * float(np.sum(spec.lam[1:, None] * d[1:] * d[1:]))


def exact_line_search(spec, model, u, d, y0):
    """Minimizer s* of s -> J(u + s d)."""
    d = np.asarray(d, dtype=float)
    g = eval_gradient(spec, model, u, y0)
    q = _curvature(spec, model, d, state_response(model, spec, d))
    if not q > 0:
        raise ValueError("degenerate search direction: zero curvature")
    return -spec.u_inner(g, d) / q


def running_cost(spec, model, y, u_next, k=0):
    """l(y^k, u^{k+1}) with the weights of ``spec`` at step k."""
    yd_vec, yd_sq = model.desired(spec.theta_yd[k:k + 1])
    y = np.asarray(y, dtype=float)
    track = float(y @ (model.apply_D(y[None])[0]) - 2.0 * yd_vec[0] @ y + yd_sq[0])
    du = np.asarray(u_next, dtype=float) - spec.ud[k + 1]
    return 0.5 * spec.tau * (spec.sigma1[k] * max(track, 0.0) + spec.lam[k + 1] * float(du @ du))


# ---------------------------------------------------------------- BFGS / PDAS

def _bfgs(spec, model, y0, u, free, opts):
    """BFGS with exact line search over the entries of ``u`` flagged in ``free``."""
    tau = spec.tau
    u = u.copy()
    y = solve_state(model, spec, u, y0)
    p = solve_adjoint(model, spec, y)
    g = gradient_from_adjoint(spec, model, u, p)
    idx = np.flatnonzero(free.ravel())
    h0 = 1.0 / (tau * np.broadcast_to(spec.lam[:, None], u.shape).ravel()[idx])
    H = np.diag(h0)
    gf = tau * g.ravel()[idx]
    gnorm = float(np.sqrt(gf @ gf / tau)) if idx.size else 0.0
    tol = opts.tol_abs + opts.tol_rel * gnorm
    it, best, since_best, stalled = 0, gnorm, 0, False
    hist = [gnorm]
    while gnorm > tol and idx.size:
        if it >= opts.max_iter:
            J = eval_cost(spec, model, y, u)
            sol = TrajectorySolution(y, p, u, J, it, grad_norm=gnorm, converged=False)
            raise ConvergenceError(f"BFGS did not converge in {it} iterations "
                                   f"(gradient {gnorm:.3e} > {tol:.3e})", sol)
        df = -H @ gf
        slope = float(gf @ df)
        if slope >= 0:
            H = np.diag(h0)
            df = -h0 * gf
            slope = float(gf @ df)
        d = np.zeros(u.size)
        d[idx] = df
        d = d.reshape(u.shape)
        yr = state_response(model, spec, d)
        q = _curvature(spec, model, d, yr)
        if not q > 0:
            break
        s = -slope / q
        u += s * d
        y += s * yr
        p = solve_adjoint(model, spec, y)
        g = gradient_from_adjoint(spec, model, u, p)
        gf_new = tau * g.ravel()[idx]
        sv, yv = s * df, gf_new - gf
        sy = float(sv @ yv)
        if sy > 0:
            Hy = H @ yv
            H += (sy + yv @ Hy) / sy ** 2 * np.outer(sv, sv) - (np.outer(Hy, sv) + np.outer(sv, Hy)) / sy
        gf = gf_new
        gnorm = float(np.sqrt(gf @ gf / tau))
        hist.append(gnorm)
        it += 1
        if gnorm < best:
            best, since_best = gnorm, 0
        else:
            since_best += 1
            if since_best >= opts.stall_iter:
                stalled = True
                break
    # fresh sweeps so the returned trajectory satisfies the recurrence exactly
    y = solve_state(model, spec, u, y0)
    p = solve_adjoint(model, spec, y)
    g = gradient_from_adjoint(spec, model, u, p)
    gnorm = float(np.sqrt(tau * np.sum(g.ravel()[idx] ** 2))) if idx.size else 0.0
    J = eval_cost(spec, model, y, u)
    return TrajectorySolution(y, p, u, J, it, grad_norm=gnorm, converged=not stalled,
                              stalled=stalled, history=hist)


def initial_control(spec):
    u = spec.ud.copy()
    if spec.constrained:
        u = np.clip(u, spec.lower, spec.upper)
    u[0] = 0.0
    return u


def solve_ocp_unconstrained(spec, model, y0, options=None, u_init=None):
    """Unconstrained optimum by BFGS with exact line search."""
    opts = options or SolverOptions()
    y0 = np.asarray(y0, dtype=float)
    _check(model, spec, y0=y0)
    u = initial_control(replace(spec, constrained=False)) if u_init is None else np.array(u_init, float)
    free = np.ones_like(u, dtype=bool)
    free[0] = False
    return _bfgs(spec, model, y0, u, free, opts)


def _active_sets(spec, u, g):
    c = spec.lam[:, None]
    lower = g + c * (spec.lower - u) > 0
    upper = g + c * (spec.upper - u) < 0
    lower[0] = upper[0] = False
    upper &= ~lower
    return lower, upper


def solve_ocp_constrained(spec, model, y0, options=None):
    """Box-constrained optimum: primal-dual active sets around BFGS.

    The multiplier is the gradient on the active set and zero on the inactive
    set; a component is lower-active when ``xi + c (u_a - u) > 0``. If an
    active-set configuration repeats, the remaining work is handed to a primal
    active-set loop, which cannot cycle.
    """
    if not spec.constrained:
        raise ValueError("spec is not constrained")
    opts = options or SolverOptions()
    y0 = np.asarray(y0, dtype=float)
    _check(model, spec, y0=y0)
    u = initial_control(spec)
    g = eval_gradient(spec, model, u, y0)
    lower, upper = _active_sets(spec, u, g)
    total = 0
    seen = set()
    for outer in range(1, opts.pdas_max_iter + 1):
        seen.add(lower.tobytes() + upper.tobytes())
        u = np.where(lower, spec.lower, np.where(upper, spec.upper, u))
        u[0] = 0.0
        free = ~(lower | upper)
        free[0] = False
        sol = _bfgs(spec, model, y0, u, free, opts)
        total += sol.iterations
        u = sol.u
        # multiplier: the gradient on the active set, zero on the inactive one
        xi = np.where(free, 0.0, gradient_from_adjoint(spec, model, u, sol.p))
        new_lower, new_upper = _active_sets(spec, u, xi)
        if np.array_equal(new_lower, lower) and np.array_equal(new_upper, upper):
            sol.iterations = total
            sol.pdas_iterations = outer
            sol.lower_active, sol.upper_active = lower, upper
            return sol
        if new_lower.tobytes() + new_upper.tobytes() in seen:
            log.debug("PDAS cycle after %d iterations; switching to primal active sets", outer)
            sol = _primal_active_set(spec, model, y0, u, opts)
            sol.iterations += total
            sol.pdas_iterations = outer
            return sol
        lower, upper = new_lower, new_upper
    sol.iterations, sol.pdas_iterations = total, opts.pdas_max_iter
    raise ConvergenceError(f"active sets did not settle in {opts.pdas_max_iter} PDAS iterations", sol)


def _primal_active_set(spec, model, y0, u, opts):
    """Feasible-point active-set loop: one index enters or leaves per step, J never increases."""
    lo, hi = spec.lower, spec.upper
    u = np.clip(u, lo, hi)
    u[0] = 0.0
    lower = u <= lo
    upper = (u >= hi) & ~lower
    lower[0] = upper[0] = False
    total = 0
    max_iter = 4 * u[1:].size + 50
    for _ in range(max_iter):
        free = ~(lower | upper)
        free[0] = False
        sol = _bfgs(spec, model, y0, u, free, opts)
        total += sol.iterations
        step = sol.u - u
        ratio = np.full(u.shape, np.inf)
        below = free & (sol.u < lo)
        above = free & (sol.u > hi)
        ratio[below] = (lo - u)[below] / step[below]
        ratio[above] = (hi - u)[above] / step[above]
        if np.isfinite(ratio).any():
            j = np.unravel_index(np.argmin(ratio), u.shape)
            u = u + min(max(ratio[j], 0.0), 1.0) * step
            if below[j]:
                lower[j], u[j] = True, lo[j]
            else:
                upper[j], u[j] = True, hi[j]
            u = np.clip(u, lo, hi)
            u[0] = 0.0
            continue
        u = sol.u
        g = gradient_from_adjoint(spec, model, u, sol.p)
        gtol = opts.tol_abs + opts.tol_rel * float(np.abs(g[1:]).max(initial=0.0))
        wrong = np.where(lower & (g < -gtol), -g, 0.0) + np.where(upper & (g > gtol), g, 0.0)
        if not wrong.any():
            sol.iterations = total
            sol.lower_active, sol.upper_active = lower, upper
            return sol
        j = np.unravel_index(np.argmax(wrong), u.shape)
        lower[j] = upper[j] = False
    raise ConvergenceError(f"primal active-set loop did not finish in {max_iter} steps", sol)


def solve_ocp(spec, model, y0, options=None):
    if spec.constrained:
        return solve_ocp_constrained(spec, model, y0, options)
    return solve_ocp_unconstrained(spec, model, y0, options)


KKT_SIZE_CAP = 6000


def kkt_direct_solve(spec, model, y0):
    """Solve the coupled optimality system as one dense linear system.

    Unknown ordering is (y^1..y^K, p^1..p^K, u^1..u^K).
    """
    K, n, m, tau = spec.K, model.n, model.m, spec.tau
    size = K * (2 * n + m)
    if size > KKT_SIZE_CAP:
        raise ValueError(f"KKT system of size {size} exceeds the dense cap {KKT_SIZE_CAP}")
    dense = (lambda X: X.toarray() if sp.issparse(X) else np.asarray(X))
    M, A, D, B = dense(model.M), dense(model.A), dense(model.D), model.B
    c = spec.state_weights()
    yd_vec, _ = model.desired(spec.theta_yd)
    Kmat = np.zeros((size, size))
    rhs = np.zeros(size)
    ys = lambda k: slice((k - 1) * n, k * n)
    ps = lambda k: slice(K * n + (k - 1) * n, K * n + k * n)
    us = lambda k: slice(2 * K * n + (k - 1) * m, 2 * K * n + k * m)
    for k in range(1, K + 1):
        r = ys(k)
        Kmat[r, ys(k)] = M + tau * A
        if k > 1:
            Kmat[r, ys(k - 1)] = -M
        else:
            rhs[r] = M @ y0
        Kmat[r, us(k)] = -tau * B
        r = ps(k)
        Kmat[r, ps(k)] = M + tau * A.T
        if k < K:
            Kmat[r, ps(k + 1)] = -M
        Kmat[r, ys(k)] = c[k] * D
        rhs[r] = c[k] * yd_vec[k]
        r = us(k)
        Kmat[r, us(k)] = spec.lam[k] * np.eye(m)
        Kmat[r, ps(k)] = -B.T
        rhs[r] = spec.lam[k] * spec.ud[k]
    x = np.linalg.solve(Kmat, rhs)
    y = np.vstack([y0, x[:K * n].reshape(K, n)])
    p = np.vstack([np.zeros(n), x[K * n:2 * K * n].reshape(K, n)])
    u = np.vstack([np.zeros(m), x[2 * K * n:].reshape(K, m)])
    return TrajectorySolution(y, p, u, eval_cost(spec, model, y, u))
