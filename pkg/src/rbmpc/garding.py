"""Exponential change of variables for weakly coercive operators.

If ``a(v, v) + delta m(v, v) >= alpha ||v||_Y^2`` the substitution
``y^k = rho^k yhat^k`` with ``rho = 1 / (1 - delta tau)`` turns the backward
Euler recurrence ``(M + tau A) y^k = M y^{k-1} + tau B u^k`` into

    (M + tau Ahat) yhat^k = M yhat^{k-1} + tau B uhat^k,   Ahat = rho (A + delta M),

exactly, with ``uhat^k = rho^{1-k} u^k`` and ``phat^k = rho^{k-1} p^k``. The
discrete factor ``rho`` plays the role of ``exp(delta tau)``; the two agree to
first order in ``tau`` but only ``rho`` makes the transformed and original
discrete problems equivalent. ``Ahat`` is coercive with the same constant
(scaled by ``rho >= 1``), which is what the error bounds need.
"""

from dataclasses import dataclass, replace

import numpy as np

from .ocp import TrajectorySolution


@dataclass(frozen=True)
class GardingData:
    delta: float
    tau: float
    K: int

    @property
    def rho(self):
        return 1.0 / (1.0 - self.delta * self.tau) if self.delta else 1.0

    @property
    def theta_scale(self):
        """Factor multiplying every coefficient of the spatial operator."""
        return self.rho

    @property
    def mass_shift(self):
        """Coefficient of the mass matrix added to the transformed operator."""
        return self.rho * self.delta

    def powers(self, shift=0):
        """``rho^(k + shift)`` for k = 0..K."""
        if not self.delta:
            return np.ones(self.K + 1)
        return self.rho ** (np.arange(self.K + 1) + shift)

    @property
    def control_factor(self):
        """Bound on ||u||_U / ||uhat||_U, i.e. the largest control scaling rho^(K-1)."""
        return float(self.rho ** (self.K - 1)) if self.delta else 1.0

    @property
    def continuous_factor(self):
        """exp(delta K tau), the continuous-time analogue of :attr:`control_factor`."""
        return float(np.exp(self.delta * self.K * self.tau))


def transform_spec(spec, delta):
    """Return the transformed problem and the data needed to map solutions back."""
    delta = float(delta)
    if delta < 0:
        raise ValueError("Garding shift must be nonnegative")
    g = GardingData(delta, spec.tau, spec.K)
    if delta == 0.0:
        return spec, g
    if delta * spec.tau >= 1.0:
        raise ValueError(f"delta * tau = {delta * spec.tau:.3g} must be below 1")
    r2k = g.powers() ** 2
    lam_w = g.powers(-1) ** 2
    lam = spec.lam * lam_w
    lam[0] = lam[1]
    down = 1.0 / g.powers()
    ctrl = 1.0 / g.powers(-1)
    lo = None if spec.lower is None else spec.lower * ctrl[:, None]
    hi = None if spec.upper is None else spec.upper * ctrl[:, None]
    hat = replace(spec, sigma1=spec.sigma1 * r2k, sigma2=spec.sigma2 * r2k[-1], lam=lam,
                  theta_yd=spec.theta_yd * down[:, None], ud=spec.ud * ctrl[:, None],
                  lower=lo, upper=hi)
    return hat, g


def untransform_solution(sol, g):
    """Map a transformed solution back to original variables."""
    if not g.delta:
        return sol
    y = sol.y * g.powers()[:, None]
    u = sol.u * g.powers(-1)[:, None]
    p = sol.p / g.powers(-1)[:, None]
    return replace(sol, y=y, u=u, p=p)


def transform_solution(sol, g):
    if not g.delta:
        return sol
    y = sol.y / g.powers()[:, None]
    u = sol.u / g.powers(-1)[:, None]
    p = sol.p * g.powers(-1)[:, None]
    return replace(sol, y=y, u=u, p=p)


def untransform_controls(u_hat, g, n=None):
    """Original controls from transformed ones; ``u_hat`` has rows k = 0..K."""
    u = u_hat * g.powers(-1)[:u_hat.shape[0], None] if g.delta else u_hat.copy()
    return u if n is None else u[1:n + 1]


def hatted_control_bound(delta_u_hat, g):
    """Bound on ||u* - u_N*||_U from the bound on the transformed control error."""
    return g.control_factor * float(delta_u_hat)


def hatted_cost_bound(delta_J_hat, g):
    """The cost is invariant under the transformation: no extra factor."""
    return float(delta_J_hat)


__all__ = ["GardingData", "transform_spec", "untransform_solution", "transform_solution",
           "untransform_controls", "hatted_control_bound", "hatted_cost_bound", "TrajectorySolution"]
