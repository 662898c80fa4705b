"""Reduced basis: bundle of offline data, online realization, POD-greedy, file format.

Residual dual norms are evaluated through upper-trapezoidal factors ``T`` with
``||sum_j c_j R_j||_Y = ||T c||`` where ``R_j = Y^{-1} g_j`` are the Riesz
representers of the parameter-independent residual components ``g_j``. ``T``
comes from a Y-orthonormal (twice iterated Gram-Schmidt) QR of the
representers, which avoids the cancellation of the usual Gram-matrix form.

Columns are ordered per basis vector, so a size-N bundle is a column prefix of
any larger one:

* state:   ``[b_1..b_m | for n: A^1 z_n .. A^Q z_n, M z_n]``
* adjoint: ``[yd_1..yd_Qd | for n: D z_n, (A^1)^T z_n .. (A^Q)^T z_n, M z_n]``
"""

import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import estimators
from .garding import GardingData, transform_spec, untransform_controls
from .ocp import DiscreteModel, SolverOptions, solve_ocp
from .problem import Coefficients

log = logging.getLogger(__name__)

BUNDLE_MAGIC = b"RBMPCBND"
BUNDLE_VERSION = 1
ORTHO_TOL = 1e-10
FACTOR_RTOL = 1e-10


class BundleFormatError(ValueError):
    pass


class GreedyError(RuntimeError):
    pass


# ------------------------------------------------------------------ bundle

@dataclass(eq=False)
class ReducedBasisBundle:
    definition: dict
    Z: np.ndarray
    M_truth: sp.csr_matrix
    M_N: np.ndarray
    D_N: np.ndarray
    B_N: np.ndarray
    A_N: np.ndarray
    yd_N: np.ndarray
    ydd: np.ndarray
    T_state: np.ndarray
    T_adj: np.ndarray
    b_norms: np.ndarray
    C_D: float
    history: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.Z.shape[1]

    @property
    def n_truth(self):
        return self.Z.shape[0]

    @property
    def Q_a(self):
        return self.A_N.shape[0]

    @property
    def m(self):
        return self.B_N.shape[1]

    @property
    def Q_yd(self):
        return self.yd_N.shape[0]

    def state_columns(self, N=None):
        N = self.N if N is None else N
        return self.m + N * (self.Q_a + 1)

    def adjoint_columns(self, N=None):
        N = self.N if N is None else N
        return self.Q_yd + N * (self.Q_a + 2)

    def truncated(self, N):
        """The size-``N`` bundle given by the first ``N`` basis vectors."""
        if not 0 <= N <= self.N:
            raise ValueError(f"N = {N} outside [0, {self.N}]")
        cs, ca = self.state_columns(N), self.adjoint_columns(N)
        hist = dict(self.history)
        return replace(
            self, Z=self.Z[:, :N], M_N=self.M_N[:N, :N], D_N=self.D_N[:N, :N], B_N=self.B_N[:N],
            A_N=self.A_N[:, :N, :N], yd_N=self.yd_N[:, :N],
            T_state=self.T_state[:min(cs, self.T_state.shape[0]), :cs],
            T_adj=self.T_adj[:min(ca, self.T_adj.shape[0]), :ca], history=hist)


class OnlineModel(DiscreteModel):
    """Reduced model for one parameter; remembers the coefficients it was built with."""

    def __init__(self, bundle, theta, shift):
        A = np.tensordot(theta, bundle.A_N, axes=1) + shift * bundle.M_N
        super().__init__(bundle.M_N, A, bundle.B_N, bundle.D_N, bundle.yd_N, bundle.ydd)
        self.theta = np.asarray(theta, dtype=float)
        self.shift = float(shift)


def realize_online(bundle, mu, coefficients=None, garding=None):
    """Reduced model ``M_N, A_N(mu), ...`` (optionally of the shifted problem)."""
    coef = coefficients or Coefficients(bundle.definition)
    mu = coef.domain.check(mu)
    g = garding or GardingData(0.0, coef.tau, 1)
    return OnlineModel(bundle, coef.theta_a(mu) * g.theta_scale, g.mass_shift)


def project_initial(bundle, y0):
    """M-orthogonal projection of a truth vector: ``(coefficients, R0)``."""
    y0 = np.asarray(y0, dtype=float)
    if bundle.N == 0:
        return np.zeros(0), float(np.sqrt(max(y0 @ (bundle.M_truth @ y0), 0.0)))
    rhs = bundle.Z.T @ (bundle.M_truth @ y0)
    ybar = sla.cho_solve(sla.cho_factor(bundle.M_N), rhs)
    e = y0 - bundle.Z @ ybar
    return ybar, float(np.sqrt(max(e @ (bundle.M_truth @ e), 0.0)))


@dataclass
class ReducedResult:
    solution: object
    spec: object
    garding: GardingData
    model: OnlineModel
    bounds: estimators.BoundReport
    R0: float

    @property
    def J(self):
        return self.solution.J

    def controls(self, n=None):
        """Controls in original variables, rows k = 1..n."""
        return untransform_controls(self.solution.u, self.garding, n if n is not None
                                    else self.spec.K)


class ReducedSolver:
    """Online solves with certification; reduced models cached per parameter."""

    def __init__(self, bundle, options=None):
        self.bundle = bundle
        self.coef = Coefficients(bundle.definition)
        self.options = options or SolverOptions()
        self._models = {}

    def model(self, mu, g):
        key = (tuple(np.asarray(mu, float).tolist()), g.delta, g.tau)
        model = self._models.get(key)
        if model is None:
            if len(self._models) > 64:
                self._models.clear()
            model = realize_online(self.bundle, mu, self.coef, g)
            self._models[key] = model
        return model

    def solve(self, mu, K, ybar0, R0, constrained=False, t0=0.0, with_bounds=True):
        spec = self.coef.ocp_spec(mu, K, constrained, t0)
        hat, g = transform_spec(spec, self.coef.garding_shift(mu))
        model = self.model(mu, g)
        sol = solve_ocp(hat, model, ybar0, self.options)
        rep = None
        if with_bounds:
            rep = estimators.evaluate_bounds(self.bundle, model, hat, sol, R0,
                                             self.coef.alpha_lb(mu), g.control_factor)
        return ReducedResult(sol, hat, g, model, rep, R0)

    def solve_from_truth(self, mu, K, y0, constrained=False, t0=0.0, with_bounds=True):
        ybar0, R0 = project_initial(self.bundle, y0)
        return self.solve(mu, K, ybar0, R0, constrained, t0, with_bounds)


# ------------------------------------------------------------------ offline construction

class _ResidualFactor:
    """Incremental Y-orthonormal QR of Riesz representers ``R = Y^{-1} G``.

    Columns whose orthogonal remainder is below ``FACTOR_RTOL`` of their norm
    are treated as dependent (e.g. a reaction term equal to the mass term).
    """

    def __init__(self, problem):
        self.ops = problem.ops
        n = self.ops.n
        self.W = np.zeros((n, 0))     # Y-orthonormal basis of span(R)
        self.YW = np.zeros((n, 0))    # Y @ W
        self.cols = []                # coefficient columns of T (variable length)

    def add(self, G):
        G = np.atleast_2d(np.asarray(G, dtype=float).T).T
        R = self.ops.solve_Y(G)
        Y = self.ops.Y
        for j in range(G.shape[1]):
            r = R[:, j]
            nrm0 = np.sqrt(max(r @ G[:, j], 0.0))
            coef = np.zeros(self.W.shape[1])
            for _ in range(2):
                c = self.YW.T @ r
                r = r - self.W @ c
                coef += c
            Yr = Y @ r
            nrm = np.sqrt(max(r @ Yr, 0.0))
            if nrm > FACTOR_RTOL * nrm0 and nrm > 0:
                self.W = np.column_stack([self.W, r / nrm])
                self.YW = np.column_stack([self.YW, Yr / nrm])
                coef = np.append(coef, nrm)
            self.cols.append(coef)

    def matrix(self):
        r = self.W.shape[1]
        T = np.zeros((r, len(self.cols)))
        for j, c in enumerate(self.cols):
            T[:len(c), j] = c
        return T


class BundleBuilder:
    """Grows a bundle one basis vector at a time; everything is kept consistent."""

    def __init__(self, problem):
        self.problem = problem
        ops = problem.ops
        self.ops = ops
        self.Z = np.zeros((ops.n, 0))
        self.YZ = np.zeros((ops.n, 0))
        self.state = _ResidualFactor(problem)
        self.adj = _ResidualFactor(problem)
        self.state.add(ops.B)
        if ops.yd.shape[0]:
            self.adj.add(ops.yd.T)
        self.C_D = float(problem.C_D)
        self.b_norms = np.asarray(problem.b_dual_norms, dtype=float)
        self._Mt = ops.M.tocsr()
        self._Dt = ops.D.tocsr()
        self._At = [Aq.tocsr() for Aq in ops.A_terms]

    @property
    def N(self):
        return self.Z.shape[1]

    def orthogonalize(self, v):
        """Y-orthogonal complement of ``v`` (two Gram-Schmidt passes) and its Y-norm."""
        v = np.asarray(v, dtype=float).copy()
        for _ in range(2):
            v -= self.Z @ (self.YZ.T @ v)
        return v, float(np.sqrt(max(v @ (self.ops.Y @ v), 0.0)))

    def try_add(self, v, tol=ORTHO_TOL):
        """Append the normalized complement of a unit-Y-norm candidate; False if deflated."""
        w, nrm = self.orthogonalize(v)
        if nrm <= tol:
            return False
        z = w / nrm
        self.Z = np.column_stack([self.Z, z])
        self.YZ = np.column_stack([self.YZ, self.ops.Y @ z])
        self.state.add(np.column_stack([Aq @ z for Aq in self._At] + [self._Mt @ z]))
        self.adj.add(np.column_stack([self._Dt @ z] + [Aq.T @ z for Aq in self._At] + [self._Mt @ z]))
        return True

    def projection_error(self, V):
        """Rows of ``V`` minus their Y-orthogonal projection onto the current space."""
        if self.N == 0:
            return V.copy()
        return V - (V @ self.YZ) @ self.Z.T

    def bundle(self, history=None, meta=None):
        Z = self.Z
        ops = self.ops
        M_N = Z.T @ (self._Mt @ Z)
        return ReducedBasisBundle(
            definition=self.problem.definition, Z=Z.copy(), M_truth=self._Mt.copy(),
            M_N=_sym(M_N), D_N=_sym(Z.T @ (self._Dt @ Z)), B_N=Z.T @ ops.B,
            A_N=np.array([Z.T @ (Aq @ Z) for Aq in self._At]).reshape(len(self._At), self.N, self.N),
            yd_N=(ops.yd @ Z).reshape(ops.yd.shape[0], self.N), ydd=np.array(ops.ydd, dtype=float),
            T_state=self.state.matrix(), T_adj=self.adj.matrix(), b_norms=self.b_norms.copy(),
            C_D=self.C_D, history=dict(history or {}), meta=dict(meta or {}))


def _sym(a):
    return 0.5 * (a + a.T)


def dominant_mode(snapshots, Y):
    """Leading POD mode (unit Y-norm) of snapshot rows and its singular value."""
    S = np.asarray(snapshots, dtype=float)
    corr = S @ (Y @ S.T)
    corr = 0.5 * (corr + corr.T)
    w, V = np.linalg.eigh(corr)
    lead = max(w[-1], 0.0)
    if lead <= 0:
        return None, 0.0
    mode = V[:, -1] @ S
    nrm = np.sqrt(max(mode @ (Y @ mode), 0.0))
    if nrm == 0:
        return None, 0.0
    return mode / nrm, float(np.sqrt(lead))


# ------------------------------------------------------------------ greedy

@dataclass
class GreedyConfig:
    training: np.ndarray
    N_max: int
    indicator: str = "cost"          # "cost": Delta_J_uc/|J_N|, "control": Delta_u/||u_N||_U
    tol: float = 1e-8
    K_train: int = 20
    seed_initial: bool = False       # start the basis with the (normalized) initial state
    first_mu: tuple = None           # first pick when no indicator is available yet
    deflation_tol: float = ORTHO_TOL
    mode_rtol: float = 1e-10         # relative POD energy below which a mode is deflated
    stagnation_window: int = 3

    def __post_init__(self):
        self.training = np.atleast_2d(np.asarray(self.training, dtype=float))
        if self.training.size == 0:
            raise ValueError("training set is empty")
        if not self.tol > 0:
            raise ValueError("greedy tolerance must be positive")
        if self.indicator not in ("cost", "control"):
            raise ValueError(f"unknown indicator {self.indicator!r}")
        if self.N_max < 1 or self.K_train < 1:
            raise ValueError("N_max and K_train must be positive")


def indicator_value(result, kind):
    rep = result.bounds
    if kind == "cost":
        return rep.delta_J_uc / max(abs(result.J), 1e-300)
    unorm = result.spec.u_norm(result.solution.u)
    return rep.delta_u / max(unorm, 1e-300)


def evaluate_indicators(bundle, training, K, y0, kind, options=None):
    solver = ReducedSolver(bundle, options)
    ybar0, R0 = project_initial(bundle, y0)
    vals = np.empty(len(training))
    for i, mu in enumerate(training):
        res = solver.solve(mu, K, ybar0, R0, constrained=False)
        v = indicator_value(res, kind)
        if not np.isfinite(v):
            raise GreedyError(f"indicator is not finite at parameter {list(mu)}")
        vals[i] = v
    return vals


def pod_greedy(problem, config, y0=None, options=None):
    """Build a reduced basis by POD/greedy; training OCPs are unconstrained."""
    for mu in config.training:
        problem.domain.check(mu)
    y0 = problem.initial_condition() if y0 is None else np.asarray(y0, dtype=float)
    builder = BundleBuilder(problem)
    t_start = time.perf_counter()
    if config.seed_initial and np.any(y0):
        v = y0 / np.sqrt(y0 @ (problem.ops.Y @ y0))
        builder.try_add(v, config.deflation_tol)
    hist = {"mu": [], "indicator": [], "N": [], "flags": []}
    deflated = np.zeros(len(config.training), dtype=bool)
    meta = {"indicator": config.indicator, "K_train": int(config.K_train),
            "seed_initial": bool(config.seed_initial), "tol": float(config.tol)}
    while builder.N < config.N_max:
        if builder.N == 0 or (config.first_mu is not None and not hist["mu"]):
            if config.first_mu is None:
                idx, val = 0, float("inf")
            else:
                idx = int(np.argmin(np.linalg.norm(config.training - np.asarray(config.first_mu), axis=1)))
                val = float("inf")
        else:
            vals = evaluate_indicators(builder.bundle(), config.training, config.K_train, y0,
                                       config.indicator, options)
            vals[deflated] = -np.inf
            idx = int(np.argmax(vals))
            val = float(vals[idx])
            if val <= config.tol:
                hist["flags"].append(f"tolerance reached at N={builder.N}")
                hist["final_indicator"] = val
                break
            if val == -np.inf:
                hist["flags"].append("every training parameter deflated")
                break
        mu = config.training[idx]
        sol, _, _, _ = problem.solve_truth(mu, config.K_train, y0, False, options=options)
        added = 0
        for traj in (sol.y[1:], sol.p[1:]):
            if builder.N >= config.N_max:
                break
            err = builder.projection_error(traj)
            mode, sv = dominant_mode(err, problem.ops.Y)
            _, full = dominant_mode(traj, problem.ops.Y)
            if mode is None or sv <= config.mode_rtol * max(full, 1e-300):
                continue
            added += builder.try_add(mode, config.deflation_tol)
        hist["mu"].append(mu.tolist())
        hist["indicator"].append(val)
        hist["N"].append(builder.N)
        if not added:
            deflated[idx] = True
            hist["flags"].append(f"deflated parameter {mu.tolist()} at N={builder.N}")
        w = config.stagnation_window
        ind = [v for v in hist["indicator"] if np.isfinite(v)]
        if len(ind) > w and min(ind[-w:]) >= ind[-w - 1]:
            hist["flags"].append(f"stagnation over {w} iterations at N={builder.N}")
            log.warning("greedy indicator stagnating at N=%d", builder.N)
    meta["offline_seconds"] = time.perf_counter() - t_start
    return builder.bundle(hist, meta)


# ------------------------------------------------------------------ serialization

_ARRAYS = ("Z", "M_N", "D_N", "B_N", "A_N", "yd_N", "ydd", "T_state", "T_adj", "b_norms")


def _write_array(buf, arr):
    arr = np.ascontiguousarray(arr)
    code = {"f": b"f", "i": b"i"}[arr.dtype.kind]
    buf.write(code + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.astype("<f8" if code == b"f" else "<i8").tobytes())


def _read_array(buf, name):
    head = buf.read(5)
    if len(head) < 5:
        raise BundleFormatError(f"file truncated while reading array {name!r}")
    code, ndim = head[:1], struct.unpack("<I", head[1:])[0]
    if code not in (b"f", b"i") or ndim > 8:
        raise BundleFormatError(f"corrupt header of array {name!r}")
    raw = buf.read(8 * ndim)
    if len(raw) < 8 * ndim:
        raise BundleFormatError(f"file truncated in the shape of array {name!r}")
    shape = struct.unpack(f"<{ndim}Q", raw)
    count = int(np.prod(shape)) if ndim else 1
    data = buf.read(8 * count)
    if len(data) < 8 * count:
        raise BundleFormatError(f"file truncated in the data of array {name!r}: "
                                f"expected {8 * count} bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<f8" if code == b"f" else "<i8").reshape(shape).copy()


def bundle_bytes(bundle):
    manifest = {"version": BUNDLE_VERSION, "definition": bundle.definition, "C_D": bundle.C_D,
                "history": bundle.history, "meta": bundle.meta,
                "arrays": list(_ARRAYS) + ["M_data", "M_indices", "M_indptr", "M_shape"]}
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC + struct.pack("<IQ", BUNDLE_VERSION, len(text)) + text)
    for name in _ARRAYS:
        _write_array(buf, np.asarray(getattr(bundle, name), dtype=float))
    M = sp.csr_matrix(bundle.M_truth)
    M.sort_indices()
    _write_array(buf, M.data.astype(float))
    _write_array(buf, M.indices.astype(np.int64))
    _write_array(buf, M.indptr.astype(np.int64))
    _write_array(buf, np.array(M.shape, dtype=np.int64))
    return buf.getvalue()


def save_bundle(bundle, path):
    with open(path, "wb") as fh:
        fh.write(bundle_bytes(bundle))


def load_bundle(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return bundle_from_bytes(blob, str(path))


def bundle_from_bytes(blob, where="<bytes>"):
    if blob[:len(BUNDLE_MAGIC)] != BUNDLE_MAGIC:
        raise BundleFormatError(f"{where}: not a reduced-basis bundle (bad magic header)")
    buf = io.BytesIO(blob)
    buf.seek(len(BUNDLE_MAGIC))
    head = buf.read(12)
    if len(head) < 12:
        raise BundleFormatError(f"{where}: file truncated in the header")
    version, nbytes = struct.unpack("<IQ", head)
    if version != BUNDLE_VERSION:
        raise BundleFormatError(f"{where}: bundle version {version}, expected {BUNDLE_VERSION}")
    text = buf.read(nbytes)
    if len(text) < nbytes:
        raise BundleFormatError(f"{where}: file truncated in the manifest")
    try:
        manifest = json.loads(text)
    except ValueError as exc:
        raise BundleFormatError(f"{where}: corrupt manifest ({exc})") from exc
    arrays = {name: _read_array(buf, name) for name in manifest["arrays"]}
    if buf.read(1):
        raise BundleFormatError(f"{where}: trailing bytes after the last array")
    shape = tuple(int(s) for s in arrays.pop("M_shape"))
    M = sp.csr_matrix((arrays.pop("M_data"), arrays.pop("M_indices"), arrays.pop("M_indptr")),
                      shape=shape)
    return ReducedBasisBundle(definition=manifest["definition"], M_truth=M, C_D=manifest["C_D"],
                              history=manifest["history"], meta=manifest["meta"], **arrays)
