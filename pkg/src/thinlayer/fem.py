"""Piecewise-linear finite elements on :class:`~thinlayer.geometry.TaggedMesh`.

Volume integrals use the three-point rule with barycentric points
``(2/3, 1/6, 1/6)`` and permutations, which is exact for quadratics.
Edge integrals use two-point Gauss-Legendre.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import LinearSolveFailure, NonPositiveDiffusion, PicardDivergence, UnknownTag
from .geometry import TaggedMesh

QUAD_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
QUAD_W = np.full(3, 1 / 3)
_GAUSS2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


def triangle_data(mesh: TaggedMesh) -> tuple[np.ndarray, np.ndarray]:
    """Areas ``(M,)`` and basis gradients ``(M, 3, 2)``."""
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    inv = np.empty((len(p), 2, 2))
    inv[:, 0, 0] = d2[:, 1] / det
    inv[:, 0, 1] = -d2[:, 0] / det
    inv[:, 1, 0] = -d1[:, 1] / det
    inv[:, 1, 1] = d1[:, 0] / det
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    # grad phi_i = J^{-T} grad_ref phi_i; rows of inv are the rows of J^{-1}
    grads = np.einsum("ik,mkj->mij", ref, inv)
    return 0.5 * det, grads


def quad_points(mesh: TaggedMesh) -> np.ndarray:
    """Quadrature points ``(M, 3, 2)``."""
    return np.einsum("qi,mij->mqj", QUAD_BARY, mesh.vertices[mesh.triangles])


def at_quad(mesh: TaggedMesh, values: np.ndarray) -> np.ndarray:
    """Interpolate nodal values to quadrature points ``(M, 3)``."""
    return values[mesh.triangles] @ QUAD_BARY.T


def region_weights(mesh: TaggedMesh, mapping: dict[str, float], default: float = 0.0) -> np.ndarray:
    """Per-triangle weights from a region-to-weight mapping."""
    w = np.full(mesh.n_triangles, float(default))
    for reg, val in mapping.items():
        w[mesh.regions == reg] = val
    return w


def _weights(mesh, weights):
    if weights is None:
        return np.ones(mesh.n_triangles)
    if isinstance(weights, dict):
        return region_weights(mesh, weights)
    return np.broadcast_to(np.asarray(weights, dtype=float), (mesh.n_triangles,))


def _scatter(mesh, local):
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_mass(mesh: TaggedMesh, weights=None, lumped: bool = False) -> sp.csr_matrix:
    """Weighted mass matrix ``sum_K w(K) int_K phi_i phi_j``."""
    area, _ = triangle_data(mesh)
    w = _weights(mesh, weights) * area
    if lumped:
        diag = np.zeros(mesh.n_vertices)
        np.add.at(diag, mesh.triangles, np.repeat(w[:, None] / 3.0, 3, axis=1))
        return sp.diags(diag).tocsr()
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _scatter(mesh, w[:, None, None] * ref)


def _per_quad(mesh, arr, width=2):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        return np.broadcast_to(arr, (mesh.n_triangles, 3, width))
    if arr.ndim == 2:
        return np.broadcast_to(arr[:, None, :], (mesh.n_triangles, 3, width))
    return arr


def assemble_stiffness(mesh: TaggedMesh, diffusion, weights=None) -> sp.csr_matrix:
    """Weighted stiffness matrix for a diagonal diffusion tensor.

    Parameters
    ----------
    diffusion : array_like
        Diagonal entries, shape ``(2,)``, ``(M, 2)`` or ``(M, 3, 2)`` (per
        quadrature point).
    weights : optional
        Per-triangle multipliers (array or region mapping).

    Raises
    ------
    NonPositiveDiffusion
        If any diagonal entry is not positive.
    """
    D = _per_quad(mesh, diffusion)
    if not np.all(D > 0):
        raise NonPositiveDiffusion("diffusion entries must be positive")
    area, g = triangle_data(mesh)
    Dbar = np.einsum("mqk,q->mk", D, QUAD_W)
    w = _weights(mesh, weights) * area
    local = np.einsum("mik,mk,mjk->mij", g, Dbar, g) * w[:, None, None]
    return _scatter(mesh, local)


def assemble_drift_load(mesh: TaggedMesh, B, drift_values: np.ndarray, weights=None) -> np.ndarray:
    """Vector ``int w B P grad(phi_i)`` with ``P`` given at quadrature points."""
    Bq = _per_quad(mesh, B)
    area, g = triangle_data(mesh)
    w = _weights(mesh, weights) * area
    flux = np.einsum("mqk,mq,q->mk", Bq, np.asarray(drift_values, float), QUAD_W)
    local = np.einsum("mik,mk->mi", g, flux) * w[:, None]
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.triangles, local)
    return out


def assemble_source_load(mesh: TaggedMesh, values: np.ndarray, weights=None) -> np.ndarray:
    """Vector ``int w f phi_i`` with ``f`` given at quadrature points ``(M, 3)``."""
    area, _ = triangle_data(mesh)
    w = _weights(mesh, weights) * area
    local = (np.asarray(values, float) * QUAD_W) @ QUAD_BARY * w[:, None]
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.triangles, local)
    return out


def assemble_boundary_load(mesh: TaggedMesh, g, tag: str, scaling: float = 1.0) -> np.ndarray:
    """Vector ``scaling * int_tag g phi_i ds``.

    ``g`` is a constant or a callable of points ``(..., 2)``.

    Raises
    ------
    UnknownTag
        If no edge carries ``tag``.
    """
    edges = mesh.tag_edges(tag)
    if len(edges) == 0:
        raise UnknownTag(f"tag {tag!r} not present on mesh")
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    length = np.hypot(*(b - a).T)
    out = np.zeros(mesh.n_vertices)
    for s in _GAUSS2:
        x = a + s * (b - a)
        val = g(x) if callable(g) else np.full(len(x), float(g))
        contrib = 0.5 * length * np.asarray(val, float) * scaling
        np.add.at(out, edges[:, 0], contrib * (1 - s))
        np.add.at(out, edges[:, 1], contrib * s)
    return out


def assemble_edge_mass(mesh: TaggedMesh, tag: str, weight: float = 1.0) -> sp.csr_matrix:
    """One-dimensional mass matrix on the edges carrying ``tag``."""
    edges = mesh.tag_edges(tag)
    if len(edges) == 0:
        raise UnknownTag(f"tag {tag!r} not present on mesh")
    length = np.hypot(*(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]]).T)
    loc = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    vals = (weight * length)[:, None, None] * loc
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, n))


class FactorizedSolver:
    """Sparse LU factorization with a residual check.

    Parameters
    ----------
    matrix : sparse matrix
    tol : float
        Bound on the relative residual ``|Ax - b| / |b|``.
    """

    def __init__(self, matrix, tol: float = 1e-10):
        self.matrix = sp.csc_matrix(matrix)
        self.tol = tol
        try:
            self._lu = spla.splu(self.matrix)
        except RuntimeError as exc:  # singular factor
            raise LinearSolveFailure(str(exc)) from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        x = self._lu.solve(rhs)
        res = self._residual(x, rhs)
        if res > self.tol:
            x = x + self._lu.solve(rhs - self.matrix @ x)
            res = self._residual(x, rhs)
        if not np.isfinite(res) or res > self.tol:
            raise LinearSolveFailure(f"relative residual {res:.3e} above {self.tol:.1e}")
        return x

    def _residual(self, x, rhs):
        nb = np.linalg.norm(rhs)
        r = np.linalg.norm(self.matrix @ x - rhs)
        return r / nb if nb > 0 else r


def linear_solve(matrix, rhs, tol_lin: float = 1e-10) -> np.ndarray:
    """Solve ``matrix x = rhs`` directly and verify the relative residual."""
    return FactorizedSolver(matrix, tol_lin).solve(rhs)


@dataclass
class AssembledSystem:
    """Matrices of one implicit Euler step ``(M/dt + A) v = M/dt v_old + F + N``.

    Attributes
    ----------
    mass, stiffness : sparse matrices
        Already carrying the region scalings.
    dt : float
    constrained : ndarray
        Indices with prescribed values (Dirichlet nodes).
    """

    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    dt: float
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tol_lin: float = 1e-10

    def __post_init__(self):
        n = self.mass.shape[0]
        mask = np.ones(n, dtype=bool)
        mask[self.constrained] = False
        self.free = np.flatnonzero(mask)
        self.operator = (self.mass / self.dt + self.stiffness).tocsr()
        self._K_ff = self.operator[self.free][:, self.free]
        self._K_fc = self.operator[self.free][:, self.constrained]
        self._solver: FactorizedSolver | None = None

    @property
    def solver(self) -> FactorizedSolver:
        if self._solver is None:
            self._solver = FactorizedSolver(self._K_ff, self.tol_lin)
        return self._solver

    def rhs(self, v_prev: np.ndarray, load: np.ndarray) -> np.ndarray:
        return self.mass @ v_prev / self.dt + load

    def solve(self, rhs: np.ndarray, dirichlet: np.ndarray | None = None) -> np.ndarray:
        """Solve with prescribed values on the constrained set (default zero)."""
        v = np.zeros(self.mass.shape[0] if rhs.ndim == 1 else rhs.shape)
        b = rhs[self.free]
        if dirichlet is not None and len(self.constrained):
            v[self.constrained] = dirichlet
            b = b - self._K_fc @ dirichlet
        v[self.free] = self.solver.solve(b)
        return v

    def residual(self, v: np.ndarray, v_prev: np.ndarray, load: np.ndarray) -> np.ndarray:
        """Full residual ``(M/dt + A) v - rhs``; nonzero on constrained rows."""
        return self.operator @ v - self.rhs(v_prev, load)


def time_step(
    system: AssembledSystem,
    v_prev: np.ndarray,
    load: np.ndarray,
    drift: Callable[[np.ndarray], np.ndarray] | None = None,
    mode: str = "lagged",
    dirichlet: np.ndarray | None = None,
    tol_picard: float = 1e-10,
    max_picard: int = 50,
) -> tuple[np.ndarray, dict]:
    """Advance one implicit Euler step.

    ``drift(v_star)`` returns the drift load ``N(v_star)`` added to the right
    side. ``lagged`` uses ``v_star = v_prev``; ``picard`` iterates until the
    update is below ``tol_picard`` (max norm, relative to ``max(1, |v|)``).

    Raises
    ------
    PicardDivergence
        If the iteration has not converged after ``max_picard`` sweeps.
    """
    base = system.rhs(v_prev, load)
    if drift is None:
        return system.solve(base, dirichlet), {"picard_iterations": 0}
    if mode == "lagged":
        return system.solve(base + drift(v_prev), dirichlet), {"picard_iterations": 1}
    if mode != "picard":
        raise ValueError(f"unknown drift mode {mode!r}")
    v_star = v_prev
    for it in range(1, max_picard + 1):
        v_new = system.solve(base + drift(v_star), dirichlet)
        upd = np.max(np.abs(v_new - v_star)) / max(1.0, np.max(np.abs(v_new)))
        if not np.isfinite(upd):
            break
        if upd < tol_picard:
            return v_new, {"picard_iterations": it}
        v_star = v_new
    raise PicardDivergence(f"no convergence in {max_picard} iterations")


@dataclass
class TransientField:
    """Nodal values on a mesh at uniformly spaced times."""

    mesh: TaggedMesh
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.times), self.mesh.n_vertices):
            raise ValueError("values must have shape (n_times, n_vertices)")

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def region_values(self, region: str, level: int = -1) -> np.ndarray:
        """Values at the vertices of ``region`` (sorted vertex order)."""
        return self.values[level, self.mesh.region_vertices(region)]
