"""Certified a posteriori bounds for the reduced optimal control problem.

All bounds are evaluated from per-step residual dual norms, which are obtained
from the offline residual factors stored in a
:class:`~rbmpc.rb.ReducedBasisBundle` without touching the truth space.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

NEGATIVE_TOL = 1e-8


class NumericalConsistencyError(RuntimeError):
    pass


@dataclass
class ResidualNorms:
    """Per-step dual norms ||r_y^k||, ||r_p^k|| (k = 1..K) and control residuals."""

    ry: np.ndarray
    rp: np.ndarray
    ru: np.ndarray
    tau: float

    @property
    def R_y(self):
        return math.sqrt(self.tau * float(np.sum(self.ry ** 2)))

    @property
    def R_p(self):
        return math.sqrt(self.tau * float(np.sum(self.rp ** 2)))

    @property
    def R_u(self):
        return math.sqrt(self.tau * float(np.sum(self.ru ** 2)))


@dataclass(frozen=True)
class BoundConstants:
    alpha: float
    C_D: float
    b_norm_sq: float
    sigma1_max: float
    sigma2: float
    lambda_min: float

    @classmethod
    def from_spec(cls, spec, alpha, C_D, b_norms):
        return cls(float(alpha), float(C_D), float(np.sum(np.asarray(b_norms) ** 2)),
                   float(np.max(spec.sigma1[1:])), float(spec.sigma2), float(np.min(spec.lam[1:])))


@dataclass
class BoundReport:
    delta_u: float
    c1: float
    c2: float
    delta_y: np.ndarray
    delta_p: np.ndarray
    st_y: np.ndarray
    st_p: np.ndarray
    delta_J_uc: float
    delta_J_c: float
    R0: float
    norms: ResidualNorms
    wall_time: float = 0.0
    control_factor: float = 1.0

    @property
    def delta_u_original(self):
        """Control bound in original variables (differs only for transformed problems)."""
        return self.control_factor * self.delta_u

    def delta_J(self, constrained):
        return self.delta_J_c if constrained else self.delta_J_uc


# ---------------------------------------------------------------- residuals

def _factor_norms(T, C):
    """Column norms of T @ C.T, i.e. dual norms of the residuals with coefficient rows C."""
    if C.shape[1] == 0:
        return np.zeros(C.shape[0])
    return np.linalg.norm(T[:, :C.shape[1]] @ C.T, axis=0)


def state_residual_coefficients(model, spec, ybar, u):
    theta, shift, tau = model.theta, model.shift, spec.tau
    Yk, Ykm = ybar[1:], ybar[:-1]
    blocks = [-t * Yk for t in theta]
    blocks.append(-((Yk - Ykm) / tau + shift * Yk))
    per_n = np.stack(blocks, axis=2).reshape(spec.K, -1)
    return np.hstack([u[1:], per_n])


def adjoint_residual_coefficients(model, spec, ybar, pbar):
    theta, shift, tau = model.theta, model.shift, spec.tau
    w = spec.sigma1[1:].copy()
    w[-1] += spec.sigma2 / tau
    P = pbar[1:]
    Pnext = np.vstack([pbar[2:], np.zeros((1, pbar.shape[1]))])
    blocks = [-w[:, None] * ybar[1:]]
    blocks += [-t * P for t in theta]
    blocks.append(-((P - Pnext) / tau + shift * P))
    per_n = np.stack(blocks, axis=2).reshape(spec.K, -1)
    head = w[:, None] * spec.theta_yd[1:]
    return np.hstack([head, per_n])


def residual_dual_norms(bundle, model, spec, sol):
    """Dual norms of the state and adjoint residuals of a reduced solution.

    ``model`` is the realized reduced model (it carries the operator
    coefficients actually used, including any transformation).
    """
    Cs = state_residual_coefficients(model, spec, sol.y, sol.u)
    Ca = adjoint_residual_coefficients(model, spec, sol.y, sol.p)
    ry = _factor_norms(bundle.T_state, Cs)
    rp = _factor_norms(bundle.T_adj, Ca)
    ru = spec.lam[1:, None] * (sol.u[1:] - spec.ud[1:]) - sol.p[1:] @ bundle.B_N
    return ResidualNorms(ry, rp, ru, spec.tau)


def clamp_gram(value, where="Gram form"):
    """Clamp tiny negative round-off of a quadratic form; fail beyond the tolerance."""
    if value >= 0:
        return value, 0.0
    if value < -NEGATIVE_TOL:
        raise NumericalConsistencyError(f"{where} is {value:.3e}, below -{NEGATIVE_TOL:g}")
    return 0.0, -value


# ---------------------------------------------------------------- bounds

def control_error_bound(norms, R0, c):
    """Return (Delta_u, c1, c2)."""
    Ry, Rp = norms.R_y, norms.R_p
    a, lam = c.alpha, c.lambda_min
    c1 = math.sqrt(c.b_norm_sq) * Rp / (math.sqrt(2.0) * a * lam)
    last = (c.C_D ** 2 * c.sigma1_max / a ** 2 + c.sigma2 / (2.0 * a)) * Ry ** 2
    if R0 == 0.0:
        last *= 0.5
    c2 = ((2.0 * math.sqrt(2.0) / a * Ry + (1.0 + math.sqrt(2.0)) / math.sqrt(a) * R0) * Rp
          + (c.C_D ** 2 * c.sigma1_max / a + c.sigma2 / 2.0) * R0 ** 2 + last) / lam
    return c1 + math.sqrt(c1 * c1 + c2), c1, c2


def state_optimality_bound(norms, delta_u, R0, c):
    """Delta^{y,*,k} for k = 1..K."""
    partial = np.cumsum(norms.ry ** 2)
    return np.sqrt(2.0 * norms.tau / c.alpha * partial
                   + 2.0 / c.alpha * c.b_norm_sq * delta_u ** 2 + R0 ** 2)


def adjoint_optimality_bound(norms, delta_y_K, c):
    """Delta^{p,*,k} for k = 1..K.

    The terminal-weight term uses sigma2^2, the coefficient that the energy
    argument for the adjoint error actually produces.
    """
    tail = np.cumsum((norms.rp ** 2)[::-1])[::-1]
    coef = 2.0 * c.C_D ** 4 * c.sigma1_max ** 2 / c.alpha ** 2 + c.sigma2 ** 2
    return np.sqrt(2.0 * norms.tau / c.alpha * tail + coef * delta_y_K ** 2)


def spatio_temporal_bounds(norms, alpha):
    partial = np.cumsum(norms.ry ** 2)
    tail = np.cumsum((norms.rp ** 2)[::-1])[::-1]
    return np.sqrt(norms.tau / alpha * partial), np.sqrt(norms.tau / alpha * tail)


def cost_error_bound(norms, delta_u, delta_y, delta_p, st_y, st_p, R0, constrained):
    uc = 0.5 * ((R0 + st_y[-1]) * delta_p[0] + st_p[0] * delta_y[-1])
    if not constrained:
        return uc
    return uc + 0.5 * norms.R_u * delta_u


def evaluate_bounds(bundle, model, spec, sol, R0, alpha, control_factor=1.0):
    """All bounds for a reduced solution in one report."""
    t0 = time.perf_counter()
    norms = residual_dual_norms(bundle, model, spec, sol)
    c = BoundConstants.from_spec(spec, alpha, bundle.C_D, bundle.b_norms)
    du, c1, c2 = control_error_bound(norms, R0, c)
    dy = state_optimality_bound(norms, du, R0, c)
    dp = adjoint_optimality_bound(norms, dy[-1], c)
    sty, stp = spatio_temporal_bounds(norms, c.alpha)
    uc = cost_error_bound(norms, du, dy, dp, sty, stp, R0, False)
    cc = cost_error_bound(norms, du, dy, dp, sty, stp, R0, True)
    return BoundReport(du, c1, c2, dy, dp, sty, stp, uc, cc, R0, norms,
                       time.perf_counter() - t0, control_factor)


# ---------------------------------------------------------------- truth-side errors

def energy_norms_state(M, A, tau, e):
    """|||e^k|||_y for k = 1..K with a(v, v) = v.A v."""
    m_term = np.einsum("kn,kn->k", e[1:], _apply(M, e[1:]))
    a_term = np.einsum("kn,kn->k", e[1:], _apply(A, e[1:]))
    return np.sqrt(np.maximum(m_term + tau * np.cumsum(a_term), 0.0))


def energy_norms_adjoint(M, A, tau, e):
    """|||e^k|||_p for k = 1..K."""
    m_term = np.einsum("kn,kn->k", e[1:], _apply(M, e[1:]))
    a_term = np.einsum("kn,kn->k", e[1:], _apply(A, e[1:]))
    return np.sqrt(np.maximum(m_term + tau * np.cumsum(a_term[::-1])[::-1], 0.0))


def _apply(mat, rows):
    return (mat @ rows.T).T


@dataclass
class TruthComparison:
    control_error: float
    cost_error: float
    state_energy: np.ndarray
    adjoint_energy: np.ndarray
    initial_error: float


def compare_with_truth(truth_model, spec, truth_sol, Z, rb_sol):
    """True errors of a reduced solution (same variables as ``spec``)."""
    ey = truth_sol.y - rb_sol.y @ Z.T
    ep = truth_sol.p - rb_sol.p @ Z.T
    eu = truth_sol.u - rb_sol.u
    M, A = truth_model.M, truth_model.A
    e0 = ey[0]
    return TruthComparison(
        control_error=spec.u_norm(eu),
        cost_error=truth_sol.J - rb_sol.J,
        state_energy=energy_norms_state(M, A, spec.tau, ey),
        adjoint_energy=energy_norms_adjoint(M, A, spec.tau, ep),
        initial_error=float(np.sqrt(max(e0 @ (M @ e0), 0.0))),
    )
