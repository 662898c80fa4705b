"""Problem definitions: from a JSON-style description to assembled operators.

A definition is a plain dict (see ``presets/`` for complete examples). The
:class:`Problem` object built from it owns the mesh, the truth operator set and
the parameter-dependent coefficient functions, and knows how to state an
optimal control problem for a given parameter.
"""

import copy
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import fem, formulas
from .garding import transform_spec
from .ocp import DiscreteModel, OCPSpec, solve_ocp


class DefinitionError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterDomain:
    names: tuple
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if len(self.names) != len(self.lower) or len(self.lower) != len(self.upper):
            raise DefinitionError("parameter names and bounds must have equal length")
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise DefinitionError("parameter lower bound exceeds upper bound")

    @property
    def dim(self):
        return len(self.names)

    def contains(self, mu, rtol=1e-12):
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.dim,):
            return False
        slack = rtol * np.maximum(np.abs(self.lower), np.abs(self.upper))
        return bool(np.all(mu >= self.lower - slack) and np.all(mu <= self.upper + slack))

    def check(self, mu):
        mu = np.asarray(mu, dtype=float)
        if not self.contains(mu):
            raise ValueError(f"parameter {mu.tolist()} outside the domain "
                             f"[{list(self.lower)}, {list(self.upper)}]")
        return mu


MESH_KEYS = {1: {"dim", "n_elems", "interval", "dirichlet"},
             2: {"dim", "nx", "ny", "rectangle", "dirichlet"}}
TOP_KEYS = {"name", "mesh", "parameters", "terms", "y_inner_product", "coercivity",
            "garding_shift", "controls", "observation", "desired_state", "desired_control",
            "initial_condition", "ocp", "output"}
REQUIRED = {"mesh", "parameters", "terms", "controls", "ocp"}
OCP_KEYS = {"tau", "sigma1", "sigma2", "lambda", "bounds"}


def _require(cond, msg):
    if not cond:
        raise DefinitionError(msg)


def validate_definition(d):
    """Check a problem definition; raise :class:`DefinitionError` naming the bad key."""
    _require(isinstance(d, dict), "problem definition must be an object")
    unknown = set(d) - TOP_KEYS
    _require(not unknown, f"problem: unknown keys {sorted(unknown)}")
    missing = REQUIRED - set(d)
    _require(not missing, f"problem: missing keys {sorted(missing)}")
    mesh = d["mesh"]
    dim = mesh.get("dim")
    _require(dim in (1, 2), "problem.mesh.dim must be 1 or 2")
    unknown = set(mesh) - MESH_KEYS[dim]
    _require(not unknown, f"problem.mesh: unknown keys {sorted(unknown)}")
    par = d["parameters"]
    _require(set(par) == {"names", "lower", "upper"},
             "problem.parameters needs exactly names, lower, upper")
    P = len(par["names"])
    _require(len(par["lower"]) == P and len(par["upper"]) == P,
             "problem.parameters: bounds must match names")
    try:
        ParameterDomain(tuple(par["names"]), np.array(par["lower"], float), np.array(par["upper"], float))
    except DefinitionError as exc:
        raise DefinitionError(f"problem.parameters: {exc}") from None
    _require(isinstance(d["terms"], list) and d["terms"], "problem.terms must be a nonempty list")
    for i, t in enumerate(d["terms"]):
        where = f"problem.terms[{i}]"
        _require(t.get("kind") in ("diffusion", "mass", "convection"), f"{where}.kind invalid")
        allowed = {"kind", "theta"} | ({"velocity"} if t["kind"] == "convection" else set())
        _require(not set(t) - allowed, f"{where}: unknown keys {sorted(set(t) - allowed)}")
        if t["kind"] == "convection":
            _require(len(t.get("velocity", [])) == dim, f"{where}.velocity needs {dim} entries")
        formulas.validate(t.get("theta", 1.0), P, f"{where}.theta")
    yip = d.get("y_inner_product", {"terms": [0]})
    if yip != "l2":
        _require(isinstance(yip, dict) and set(yip) <= {"terms", "reference"},
                 "problem.y_inner_product must be 'l2' or {terms, reference}")
        for q in yip.get("terms", []):
            _require(0 <= q < len(d["terms"]), f"problem.y_inner_product: bad term index {q}")
        if "reference" in yip:
            _require(len(yip["reference"]) == P, "problem.y_inner_product.reference length")
    coer = d.get("coercivity", {"min_theta": True})
    _require(isinstance(coer, dict) and len(coer) == 1 and set(coer) <= {"constant", "min_theta"},
             "problem.coercivity must be {constant: c} or {min_theta: true}")
    if "constant" in coer:
        _require(float(coer["constant"]) > 0, "problem.coercivity.constant must be positive")
    formulas.validate(d.get("garding_shift", 0.0), P, "problem.garding_shift")
    _require(isinstance(d["controls"], list) and d["controls"], "problem.controls must be nonempty")
    for i, c in enumerate(d["controls"]):
        where = f"problem.controls[{i}]"
        if c.get("kind") == "point":
            _require(set(c) == {"kind", "x"}, f"{where}: point control needs exactly kind, x")
        elif c.get("kind") == "gaussian":
            _require(set(c) <= {"kind", "center", "width", "amplitude"} and "center" in c,
                     f"{where}: gaussian control keys are center, width, amplitude")
        else:
            raise DefinitionError(f"{where}.kind must be 'point' or 'gaussian'")
    obs = d.get("observation", "all")
    _require(obs == "all" or (isinstance(obs, dict) and set(obs) == {"box"}),
             "problem.observation must be 'all' or {box: ...}")
    for i, ds in enumerate(d.get("desired_state", [])):
        _require(set(ds) <= {"value", "theta"}, f"problem.desired_state[{i}]: keys are value, theta")
        formulas.validate(ds.get("theta", 1.0), P, f"problem.desired_state[{i}].theta")
    _require(len(d.get("desired_control", [0.0] * len(d["controls"]))) == len(d["controls"]),
             "problem.desired_control needs one entry per control")
    ic = d.get("initial_condition", {"kind": "zero"})
    _require(ic.get("kind") in ("zero", "sine"), "problem.initial_condition.kind must be zero or sine")
    _require(set(ic) <= {"kind", "amplitude", "frequency"}, "problem.initial_condition: unknown keys")
    ocp = d["ocp"]
    unknown = set(ocp) - OCP_KEYS
    _require(not unknown, f"problem.ocp: unknown keys {sorted(unknown)}")
    _require({"tau", "lambda"} <= set(ocp), "problem.ocp needs tau and lambda")
    _require(float(ocp["tau"]) > 0, "problem.ocp.tau must be positive")
    formulas.validate(ocp["lambda"], P, "problem.ocp.lambda")
    if ocp.get("bounds") is not None:
        _require(len(ocp["bounds"]) == 2 and ocp["bounds"][0] <= ocp["bounds"][1],
                 "problem.ocp.bounds must be [lower, upper] with lower <= upper")
    _require(d.get("output") in (None, "observation_mean"), "problem.output must be 'observation_mean'")


def build_mesh(mesh_def):
    if mesh_def["dim"] == 1:
        return fem.build_mesh_1d(mesh_def["n_elems"], mesh_def.get("interval", (0.0, 1.0)),
                                 tuple(mesh_def.get("dirichlet", ("left",))))
    return fem.build_mesh_2d(mesh_def["nx"], mesh_def["ny"], mesh_def.get("rectangle", (0, 5, 0, 1)),
                             tuple(mesh_def.get("dirichlet", ("right",))))


def _term_matrix(mesh, term):
    if term["kind"] == "diffusion":
        return fem.stiffness_matrix(mesh)
    if term["kind"] == "mass":
        return fem.mass_matrix(mesh)
    return fem.convection_matrix(mesh, term["velocity"])


def _control_vector(mesh, c):
    if c["kind"] == "point":
        return fem.point_functional(mesh, c["x"])
    center = np.asarray(c["center"], dtype=float)
    width = float(c.get("width", 1.0))
    amp = float(c.get("amplitude", 1.0))
    return fem.load_vector(mesh, lambda x: amp * np.exp(-0.5 * np.sum((x - center) ** 2, axis=1) / width ** 2))


def assemble(definition, space):
    """Assemble the truth :class:`fem.AffineOperatorSet` of a problem definition."""
    mesh = space.mesh
    terms = definition["terms"]
    full = [_term_matrix(mesh, t) for t in terms]
    A_terms = tuple(space.restrict(T) for T in full)
    theta_a = tuple(t.get("theta", 1.0) for t in terms)
    M_full = fem.mass_matrix(mesh)
    M = space.restrict(M_full)
    obs = definition.get("observation", "all")
    if obs == "all":
        mask = np.ones(mesh.n_cells, dtype=bool)
    else:
        mask = fem.cells_in_box(mesh, obs["box"])
        if not mask.any():
            raise DefinitionError(f"observation box {obs['box']} contains no element barycenter; "
                                  "refine the mesh")
    D_full = fem.mass_matrix(mesh, mask)
    measure = float(mesh.cell_measures()[mask].sum())
    D = space.restrict(D_full)
    B = np.column_stack([_control_vector(mesh, c)[space.dof_to_vertex] for c in definition["controls"]])
    yip = definition.get("y_inner_product", {"terms": [0]})
    if yip == "l2":
        Y = M.copy()
    else:
        ref = yip.get("reference", [1.0] * len(definition["parameters"]["names"]))
        Y = None
        for q in yip.get("terms", [0]):
            Sq = 0.5 * (A_terms[q] + A_terms[q].T) * formulas.evaluate(theta_a[q], ref)
            Y = Sq if Y is None else Y + Sq
    Y = ((Y + Y.T) * 0.5).tocsr()
    ds = definition.get("desired_state", [])
    ones = np.ones(mesh.n_vertices)
    D_ones = (D_full @ ones)[space.dof_to_vertex]
    yd = np.array([float(c.get("value", 1.0)) * D_ones for c in ds]).reshape(len(ds), space.n_dofs)
    vals = np.array([float(c.get("value", 1.0)) for c in ds])
    ydd = np.outer(vals, vals) * measure
    theta_yd = tuple(c.get("theta", 1.0) for c in ds)
    ud = np.asarray(definition.get("desired_control", [0.0] * B.shape[1]), dtype=float)
    return fem.AffineOperatorSet(space, M, A_terms, theta_a, B, D, Y, yd, ydd, theta_yd, ud, measure)


class Coefficients:
    """Parameter-dependent coefficient functions of a definition (no assembly).

    Everything an online reduced solve needs from the definition: operator and
    desired-state coefficients, control weight, shift, coercivity bound and
    the OCP weights.
    """

    def __init__(self, definition):
        validate_definition(definition)
        self.definition = copy.deepcopy(definition)
        par = definition["parameters"]
        self.domain = ParameterDomain(tuple(par["names"]), np.array(par["lower"], float),
                                      np.array(par["upper"], float))
        ocp = definition["ocp"]
        self.tau = float(ocp["tau"])
        self.sigma1 = float(ocp.get("sigma1", 1.0))
        self.sigma2 = float(ocp.get("sigma2", 0.0))
        self.bounds = None if ocp.get("bounds") is None else tuple(map(float, ocp["bounds"]))
        self.name = definition.get("name", "custom")
        self.theta_a_formulas = tuple(t.get("theta", 1.0) for t in definition["terms"])
        ds = definition.get("desired_state", [])
        self.theta_yd_formulas = tuple(c.get("theta", 1.0) for c in ds)
        self.n_controls = len(definition["controls"])
        self.ud = np.asarray(definition.get("desired_control", [0.0] * self.n_controls), dtype=float)

    @property
    def Q_a(self):
        return len(self.theta_a_formulas)

    def theta_a(self, mu):
        return formulas.evaluate_all(self.theta_a_formulas, mu)

    def lam(self, mu):
        val = formulas.evaluate(self.definition["ocp"]["lambda"], mu)
        if not val > 0:
            raise ValueError("lambda must be positive")
        return val

    def garding_shift(self, mu):
        return max(formulas.evaluate(self.definition.get("garding_shift", 0.0), mu), 0.0)

    def alpha_lb(self, mu):
        """Coercivity lower bound of the (shifted) form with respect to the Y-product."""
        self.domain.check(mu)
        coer = self.definition.get("coercivity", {"min_theta": True})
        if "constant" in coer:
            return float(coer["constant"])
        yip = self.definition.get("y_inner_product", {"terms": [0]})
        if yip == "l2":
            raise DefinitionError("min-theta bound needs a Y-product built from the operator terms")
        terms = yip.get("terms", [0])
        if sorted(terms) != list(range(self.Q_a)):
            raise DefinitionError("min-theta bound needs every operator term in the Y-product")
        ref = yip.get("reference", [1.0] * self.domain.dim)
        th = self.theta_a(mu)
        th_ref = formulas.evaluate_all(self.theta_a_formulas, ref)
        if np.any(th <= 0) or np.any(th_ref <= 0):
            raise DefinitionError("min-theta bound needs positive coefficients")
        return float(np.min(th / th_ref))

    def theta_yd(self, mu, times):
        return np.array([[formulas.evaluate(f, mu, t) for f in self.theta_yd_formulas] for t in times]
                        ).reshape(len(times), len(self.theta_yd_formulas))

    def ocp_spec(self, mu, K, constrained=False, t0=0.0):
        mu = self.domain.check(mu)
        if constrained and self.bounds is None:
            raise ValueError("problem declares no control bounds")
        times = t0 + self.tau * np.arange(K + 1)
        return OCPSpec.uniform(K, self.tau, self.sigma1, self.sigma2, self.lam(mu),
                               theta_yd=self.theta_yd(mu, times), ud=self.ud,
                               n_controls=self.n_controls, bounds=self.bounds,
                               constrained=constrained)


class Problem(Coefficients):
    """Assembled problem plus its parameter-dependent coefficient functions."""

    def __init__(self, definition):
        super().__init__(definition)
        self.mesh = build_mesh(definition["mesh"])
        self.space = fem.FESpace(self.mesh)
        self.ops = assemble(definition, self.space)

    @cached_property
    def C_D(self):
        return fem.compute_C_D(self.ops)

    @cached_property
    def b_dual_norms(self):
        return np.array([fem.riesz_representer(b, self.ops)[1] for b in self.ops.B.T])

    def system_matrix(self, mu, theta_scale=1.0, mass_shift=0.0):
        A = theta_scale * self.ops.A(mu)
        if mass_shift:
            A = A + mass_shift * self.ops.M
        return A.tocsr()

    def truth_model(self, mu, theta_scale=1.0, mass_shift=0.0):
        o = self.ops
        return DiscreteModel(o.M, self.system_matrix(mu, theta_scale, mass_shift), o.B, o.D, o.yd, o.ydd)

    def initial_condition(self):
        ic = self.definition.get("initial_condition", {"kind": "zero"})
        if ic["kind"] == "zero":
            return np.zeros(self.space.n_dofs)
        amp = float(ic.get("amplitude", 1.0))
        freq = float(ic.get("frequency", 1.0))
        return fem.l2_project(lambda x: amp * np.sin(freq * math.pi * x[:, 0]), self.space, self.ops.M)

    def l2_norm(self, y):
        return float(np.sqrt(max(y @ (self.ops.M @ y), 0.0)))

    def output(self, y):
        """Mean of the state over the realized observation domain."""
        return float(self._obs_weights @ y) / self.ops.observation_measure

    @cached_property
    def _obs_weights(self):
        # (1, phi_i)_D restricted to free dofs
        mask = np.ones(self.mesh.n_cells, dtype=bool)
        obs = self.definition.get("observation", "all")
        if obs != "all":
            mask = fem.cells_in_box(self.mesh, obs["box"])
        D_full = fem.mass_matrix(self.mesh, mask)
        return (D_full @ np.ones(self.mesh.n_vertices))[self.space.dof_to_vertex]

    # truth solves -------------------------------------------------------------
    def transformed_model(self, mu, g):
        """Truth model of the (possibly shifted) problem, cached per parameter and shift."""
        cache = self.__dict__.setdefault("_model_cache", {})
        key = (tuple(np.asarray(mu, float).tolist()), g.delta, g.tau)
        model = cache.get(key)
        if model is None:
            if len(cache) > 32:
                cache.clear()
            model = self.truth_model(mu, g.theta_scale, g.mass_shift)
            cache[key] = model
        return model

    def solve_truth(self, mu, K, y0, constrained=False, t0=0.0, options=None):
        """Solve the truth OCP in transformed variables.

        Returns ``(solution, spec, garding_data, model)``; the solution is in
        transformed variables (identical to the original ones when the shift is 0).
        """
        spec = self.ocp_spec(mu, K, constrained, t0)
        hat, g = transform_spec(spec, self.garding_shift(mu))
        model = self.transformed_model(mu, g)
        return solve_ocp(hat, model, y0, options), hat, g, model
