"""Meshes and piecewise-linear finite elements on intervals and triangles.

Everything here is parameter independent: matrices are assembled once and
combined with coefficient formulas elsewhere.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import formulas

DIRICHLET = "dirichlet"
NEUMANN = "neumann"


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simplicial mesh with tagged boundary facets.

    ``facets`` holds vertex indices of boundary facets (one vertex per facet
    in 1D, two in 2D) and ``facet_tags`` the matching tag strings.
    """

    dim: int
    vertices: np.ndarray
    cells: np.ndarray
    facets: np.ndarray
    facet_tags: tuple

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise MeshError("dimension must be 1 or 2")
        if len(self.facet_tags) != len(self.facets):
            raise MeshError("every boundary facet needs exactly one tag")
        if np.any(self.cell_measures() <= 0):
            raise MeshError("mesh has elements with nonpositive measure")

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    def cell_measures(self):
        p = self.vertices[self.cells]
        if self.dim == 1:
            return p[:, 1, 0] - p[:, 0, 0]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def barycenters(self):
        return self.vertices[self.cells].mean(axis=1)

    def dirichlet_vertices(self):
        mask = np.array([t == DIRICHLET for t in self.facet_tags], dtype=bool)
        if not mask.any():
            return np.zeros(0, dtype=int)
        return np.unique(self.facets[mask].ravel())


def build_mesh_1d(n_elems, interval=(0.0, 1.0), dirichlet=("left",)):
    """Uniform interval mesh; ``dirichlet`` lists the endpoints ('left', 'right') to clamp."""
    if int(n_elems) < 1:
        raise MeshError("n_elems must be at least 1")
    a, b = float(interval[0]), float(interval[1])
    if not b > a:
        raise MeshError("degenerate interval")
    _check_sides(dirichlet, ("left", "right"))
    n = int(n_elems)
    x = np.linspace(a, b, n + 1)[:, None]
    cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    facets = np.array([[0], [n]])
    tags = tuple(DIRICHLET if s in dirichlet else NEUMANN for s in ("left", "right"))
    return Mesh(1, x, cells, facets, tags)


def build_mesh_2d(nx, ny, rectangle=(0.0, 5.0, 0.0, 1.0), dirichlet=("right",)):
    """Structured triangle mesh, two triangles per cell with alternating diagonals."""
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be at least 1")
    x0, x1, y0, y1 = map(float, rectangle)
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate rectangle")
    _check_sides(dirichlet, ("left", "right", "bottom", "top"))
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                cells += [(a, b, c), (a, c, d)]
            else:
                cells += [(a, b, d), (b, c, d)]
    facets, tags = [], []
    for i in range(nx):
        facets.append((vid(i, 0), vid(i + 1, 0)))
        tags.append("bottom")
        facets.append((vid(i, ny), vid(i + 1, ny)))
        tags.append("top")
    for j in range(ny):
        facets.append((vid(0, j), vid(0, j + 1)))
        tags.append("left")
        facets.append((vid(nx, j), vid(nx, j + 1)))
        tags.append("right")
    tags = tuple(DIRICHLET if s in dirichlet else NEUMANN for s in tags)
    return Mesh(2, verts, np.array(cells, dtype=int), np.array(facets, dtype=int), tags)


def _check_sides(sides, allowed):
    bad = set(sides) - set(allowed)
    if bad:
        raise MeshError(f"unknown boundary sides {sorted(bad)}; allowed {allowed}")


@dataclass(frozen=True, eq=False)
class FESpace:
    """Linear Lagrange space with Dirichlet vertices eliminated."""

    mesh: Mesh
    dof_to_vertex: np.ndarray = field(init=False)

    def __post_init__(self):
        clamped = np.zeros(self.mesh.n_vertices, dtype=bool)
        clamped[self.mesh.dirichlet_vertices()] = True
        object.__setattr__(self, "dof_to_vertex", np.flatnonzero(~clamped))

    @property
    def n_dofs(self):
        return self.dof_to_vertex.size

    def dof_coordinates(self):
        return self.mesh.vertices[self.dof_to_vertex]

    def restrict(self, mat):
        """Restrict a full-vertex matrix or vector to the free dofs."""
        idx = self.dof_to_vertex
        if sp.issparse(mat):
            return mat.tocsr()[idx][:, idx].tocsr()
        mat = np.asarray(mat)
        return mat[idx] if mat.ndim == 1 else mat[np.ix_(idx, idx)]

    def to_vertices(self, vec):
        out = np.zeros(self.mesh.n_vertices)
        out[self.dof_to_vertex] = vec
        return out

    def interpolate(self, func):
        return np.asarray(func(self.dof_coordinates()), dtype=float).reshape(-1)


# ---------------------------------------------------------------- element kernels

def _gradients(mesh):
    """Per-cell gradients of the hat functions, shape (n_cells, dim+1, dim)."""
    p = mesh.vertices[mesh.cells]
    if mesh.dim == 1:
        h = p[:, 1, 0] - p[:, 0, 0]
        g = np.stack([-1.0 / h, 1.0 / h], axis=1)
        return g[:, :, None]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    jac = np.stack([e1, e2], axis=2)  # columns are edge vectors
    inv_t = np.linalg.inv(jac).transpose(0, 2, 1)
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return np.einsum("ij,cjk->cik", ref, inv_t.transpose(0, 2, 1))


def _scatter(mesh, local, cells=None):
    cells = mesh.cells if cells is None else cells
    nloc = cells.shape[1]
    rows = np.repeat(cells, nloc, axis=1).ravel()
    cols = np.tile(cells, (1, nloc)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _local_mass(mesh):
    meas = mesh.cell_measures()
    if mesh.dim == 1:
        ref = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return meas[:, None, None] * ref[None]


def mass_matrix(mesh, cell_mask=None):
    """Full-vertex mass matrix, optionally restricted to the cells in ``cell_mask``."""
    local = _local_mass(mesh)
    if cell_mask is not None:
        local = local * cell_mask[:, None, None]
    return _scatter(mesh, local)


def stiffness_matrix(mesh):
    g = _gradients(mesh)
    local = mesh.cell_measures()[:, None, None] * np.einsum("cid,cjd->cij", g, g)
    return _scatter(mesh, local)


def convection_matrix(mesh, velocity):
    """Matrix of ``(w, v) -> ∫ v (velocity · ∇w)``, rows indexed by the test function."""
    g = _gradients(mesh)
    vel = np.asarray(velocity, dtype=float).reshape(mesh.dim)
    adv = g @ vel  # (cells, nloc): velocity · grad(phi_j)
    nloc = mesh.dim + 1
    local = (mesh.cell_measures() / nloc)[:, None, None] * np.repeat(adv[:, None, :], nloc, axis=1)
    return _scatter(mesh, local)


def _quadrature(mesh):
    """Per-cell quadrature points (cells, q, dim), weights (cells, q) and basis values (q, nloc)."""
    p = mesh.vertices[mesh.cells]
    meas = mesh.cell_measures()
    if mesh.dim == 1:
        s = np.sqrt(3.0 / 5.0)
        ref = 0.5 * (1.0 + np.array([-s, 0.0, s]))
        w = np.array([5.0, 8.0, 5.0]) / 18.0
        phi = np.column_stack([1.0 - ref, ref])
    else:
        phi = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        w = np.full(3, 1.0 / 3.0)
    pts = np.einsum("qj,cjd->cqd", phi, p)
    return pts, meas[:, None] * w[None], phi


def load_vector(mesh, func):
    """Full-vertex vector ``∫ func φ_i`` by per-element quadrature."""
    pts, wts, phi = _quadrature(mesh)
    vals = np.asarray(func(pts.reshape(-1, mesh.dim)), dtype=float).reshape(pts.shape[:2])
    local = np.einsum("cq,cq,qj->cj", vals, wts, phi)
    return np.bincount(mesh.cells.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def point_functional(mesh, x):
    """Full-vertex vector of ``v -> v(x)``; ``x`` must coincide with a vertex."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = np.linalg.norm(mesh.vertices - x[None, :], axis=1)
    i = int(np.argmin(d))
    if d[i] > 1e-12 * max(1.0, np.abs(mesh.vertices).max()):
        raise MeshError(f"point {x.tolist()} is not a mesh vertex")
    out = np.zeros(mesh.n_vertices)
    out[i] = 1.0
    return out


def cells_in_box(mesh, box):
    """Boolean mask of cells whose barycenter lies in the closed box."""
    box = np.asarray(box, dtype=float).reshape(mesh.dim, 2)
    c = mesh.barycenters()
    return np.all((c >= box[:, 0]) & (c <= box[:, 1]), axis=1)


# ---------------------------------------------------------------- operator set

@dataclass(frozen=True, eq=False)
class AffineOperatorSet:
    """Parameter-independent truth operators of one problem.

    ``A_terms[q]`` pairs with the coefficient formula ``theta_a[q]``; rows of
    ``yd`` hold the D-weighted load vectors ``(y_d^q, φ_i)_D`` and ``ydd`` the
    cross products ``(y_d^p, y_d^q)_D``.
    """

    space: FESpace
    M: sp.csr_matrix
    A_terms: tuple
    theta_a: tuple
    B: np.ndarray
    D: sp.csr_matrix
    Y: sp.csr_matrix
    yd: np.ndarray
    ydd: np.ndarray
    theta_yd: tuple
    ud: np.ndarray
    observation_measure: float

    @property
    def n(self):
        return self.M.shape[0]

    @property
    def n_controls(self):
        return self.B.shape[1]

    @property
    def Q_a(self):
        return len(self.A_terms)

    def theta(self, mu):
        return formulas.evaluate_all(self.theta_a, mu)

    def A(self, mu):
        th = self.theta(mu)
        out = th[0] * self.A_terms[0]
        for c, Aq in zip(th[1:], self.A_terms[1:]):
            out = out + c * Aq
        return out.tocsr()

    @cached_property
    def _y_solver(self):
        if self.n <= 600:
            return _DenseCholesky(self.Y.toarray())
        return spla.splu(self.Y.tocsc())

    def solve_Y(self, rhs):
        return self._y_solver.solve(np.asarray(rhs, dtype=float))


class _DenseCholesky:
    def __init__(self, mat):
        self.factor = sla.cho_factor(mat)

    def solve(self, rhs):
        return sla.cho_solve(self.factor, rhs)


def l2_project(f, space, M=None):
    """L2 projection of a callable (vectorized over points) or a dof vector."""
    M = space.restrict(mass_matrix(space.mesh)) if M is None else M
    if not callable(f):
        vec = np.asarray(f, dtype=float)
        if vec.shape != (space.n_dofs,):
            raise ValueError("dof vector has the wrong length")
        return vec.copy()
    rhs = load_vector(space.mesh, f)[space.dof_to_vertex]
    return spla.spsolve(M.tocsc(), rhs) if M.shape[0] > 1 else rhs / M.toarray()[0, 0]


def riesz_representer(functional, ops):
    """Representer r with (r, v)_Y = f(v); returns (r, dual norm)."""
    f = np.asarray(functional, dtype=float)
    r = ops.solve_Y(f)
    return r, float(np.sqrt(max(f @ r, 0.0)))


class EigenSolveError(RuntimeError):
    pass


def compute_C_D(ops):
    """sup_v ||v||_D / ||v||_Y as the root of the top generalized eigenvalue."""
    n = ops.n
    if n <= 800:
        lam = sla.eigh(ops.D.toarray(), ops.Y.toarray(), eigvals_only=True,
                       subset_by_index=[n - 1, n - 1])[0]
        return float(np.sqrt(max(lam, 0.0)))
    try:
        lam = spla.eigsh(ops.D.tocsc(), k=1, M=ops.Y.tocsc(), which="LA", tol=1e-12,
                         maxiter=20 * n, return_eigenvectors=False)[0]
    except spla.ArpackNoConvergence as exc:
        raise EigenSolveError(
            f"C_D eigen-iteration did not converge: {len(exc.eigenvalues)} of 1 values found") from exc
    return float(np.sqrt(max(lam, 0.0)))
