"""Solver for the ε-dependent problem on the perforated strip.

The unknown is ``v = u + u_b``, which vanishes on the vertical boundaries.
The lift enters the right side in weak form,

    F(phi) + int w_alpha (u_b^{n+1} - u_b^n)/dt phi + int w_beta D grad(u_b) . grad(phi),

with ``u_b`` interpolated at the nodes. This reproduces all transformed
volume, boundary and interface terms at once, so the discrete ``v - u_b``
is exactly the discrete solution of the untransformed problem.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .errors import GeometryMeshMismatch
from .geometry import TaggedMesh, build_micro_domain, triangulate
from .problem import ProblemConfig, ScalingExponents, assumption_status

log = logging.getLogger(__name__)

REGIONS = ("Left", "Middle", "Right")


def build_micro_mesh(config: ProblemConfig) -> TaggedMesh:
    """Triangulate the strip with the layer refined to ``eps / layer_divisions``."""
    g = config.geometry
    domain = build_micro_domain(g)
    size = config.mesh.size
    layer = min(size, g.eps / config.mesh.layer_divisions)
    return triangulate(domain, size, layer_edge_length=layer, mirror_x=0.0)


def _region_weights(mesh, eps, exponent):
    return fem.region_weights(mesh, {"Left": 1.0, "Middle": eps**exponent, "Right": 1.0})


@dataclass
class MicroSolution:
    """Transformed field on the micro mesh with run metadata.

    Attributes
    ----------
    field : TransientField
        ``v`` at every time level.
    lift : ndarray
        Nodal ``u_b`` at every time level.
    diagnostics : list of dict
        Per-step residual, Picard count and interface flux residual.
    """

    config: ProblemConfig
    field: fem.TransientField
    lift: np.ndarray
    diagnostics: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mesh(self) -> TaggedMesh:
        return self.field.mesh

    def physical(self) -> fem.TransientField:
        """Back-transformed field ``u = v - u_b``."""
        return fem.TransientField(self.mesh, self.field.times, self.field.values - self.lift)

    def region(self, name: str) -> np.ndarray:
        """``(n_times, n_region_vertices)`` restriction of ``v``."""
        return self.field.values[:, self.mesh.region_vertices(name)]


def _coefficient_fields(config, mesh, X):
    g = config.geometry
    c = config.coeffs
    reg = mesh.regions
    D = np.empty(X.shape)
    B = np.empty(X.shape)
    mid = reg == "Middle"
    D[reg == "Left"] = c.D_L
    D[reg == "Right"] = c.D_R
    B[reg == "Left"] = c.B_L
    B[reg == "Right"] = c.B_R
    if mid.any():
        Y = g.to_cell(X[mid])
        D[mid] = c.D_M_at(Y)
        B[mid] = c.B_M_at(Y)
    return D, B


class RegionOperator:
    """Scaled matrices and loads on a mesh whose regions are Left, Middle or Right."""

    def __init__(self, config: ProblemConfig, mesh: TaggedMesh):
        self.config = config
        self.mesh = mesh
        g = config.geometry
        a, b, gam, xi = config.scalings.as_tuple()
        self.eps = g.eps
        self.xi = xi
        self.X = fem.quad_points(mesh)
        self.D, self.B = _coefficient_fields(config, mesh, self.X)
        self.w_mass = _region_weights(mesh, g.eps, a)
        self.w_stiff = _region_weights(mesh, g.eps, b)
        self.w_drift = _region_weights(mesh, g.eps, gam)
        self.M = fem.assemble_mass(mesh, self.w_mass)
        self.A = fem.assemble_stiffness(mesh, self.D, self.w_stiff)
        self.dirichlet = mesh.tag_vertices("GammaL", "GammaR")
        self.lift = config.lift()
        self.reg = {r: mesh.regions == r for r in REGIONS}
        self.Ymid = g.to_cell(self.X[self.reg["Middle"]])
        self.has_drift = not config.coeffs.drift_free
        self.interface_nodes = np.setdiff1d(mesh.tag_vertices("BL", "BR"), self.dirichlet)
        tags = mesh.tags()
        self.g0_edges = "Gamma0" in tags

    def nodal_lift(self, t):
        return self.lift(t, self.mesh.vertices)

    def source_load(self, t):
        s = self.config.sources
        X = self.X
        vals = np.zeros(X.shape[:2])
        if self.reg["Left"].any():
            vals[self.reg["Left"]] = s.f_l(t, X[self.reg["Left"]])
        if self.reg["Right"].any():
            vals[self.reg["Right"]] = s.f_r(t, X[self.reg["Right"]])
        if self.reg["Middle"].any():
            vals[self.reg["Middle"]] = s.f_m(t, X[self.reg["Middle"]], self.Ymid)
        # w_mass carries eps^alpha on the layer
        F = fem.assemble_source_load(self.mesh, vals, self.w_mass)

        def g_h(x):
            return np.where(x[:, 0] < 0, s.g_l(t, x), s.g_r(t, x))

        F -= fem.assemble_boundary_load(self.mesh, g_h, "GammaH")
        if self.g0_edges:
            geom = self.config.geometry

            def g_0(x):
                return s.g_0(t, x, geom.to_cell(x))

            F -= fem.assemble_boundary_load(self.mesh, g_0, "Gamma0", self.eps**self.xi)
        return F

    def drift_load(self, t, drift):
        ub_q = self.lift(t, self.X)

        def N(v):
            P = drift(fem.at_quad(self.mesh, v) - ub_q)
            return fem.assemble_drift_load(self.mesh, self.B, P, self.w_drift)

        return N


def solve_micro(
    config: ProblemConfig,
    *,
    mesh: TaggedMesh | None = None,
    check: bool = True,
) -> MicroSolution:
    """Solve the micro problem with implicit Euler.

    Parameters
    ----------
    config : ProblemConfig
        Geometry, data, scalings, drift and discretization parameters.
    mesh : TaggedMesh, optional
        Precomputed mesh of ``config.geometry``.
    check : bool
        Run the assumption checks first.

    Raises
    ------
    GeometryMeshMismatch
        If ``mesh`` does not cover the configured strip.
    """
    if check:
        assumption_status(config)
    t0 = time.perf_counter()
    domain = build_micro_domain(config.geometry)
    if mesh is None:
        mesh = build_micro_mesh(config)
    elif abs(mesh.areas().sum() - domain.area) > 1e-9 or not {"BL", "BR"} <= mesh.tags():
        raise GeometryMeshMismatch("mesh does not match the configured geometry")

    op = RegionOperator(config, mesh)
    tp = config.time
    n_steps = tp.n_steps
    dt = tp.dt
    system = fem.AssembledSystem(op.M, op.A, dt, op.dirichlet)

    times = dt * np.arange(n_steps + 1)
    values = np.empty((n_steps + 1, mesh.n_vertices))
    lifts = np.empty_like(values)

    x1 = mesh.vertices[:, 0]
    k = config.geometry.kappa
    v0 = np.empty(mesh.n_vertices)
    masks = {"Left": x1 < -k, "Right": x1 > k}
    masks["Middle"] = ~(masks["Left"] | masks["Right"])
    for r in REGIONS:
        if masks[r].any():
            v0[masks[r]] = config.sources.initial(r)(mesh.vertices[masks[r]])
    lifts[0] = op.nodal_lift(0.0)
    v0 = v0 + lifts[0]
    v0[op.dirichlet] = 0.0
    values[0] = v0

    diags = []
    for n in range(1, n_steps + 1):
        t = times[n]
        lifts[n] = op.nodal_lift(t)
        load = op.source_load(t) + op.M @ (lifts[n] - lifts[n - 1]) / dt + op.A @ lifts[n]
        drift = op.drift_load(t, config.drift) if op.has_drift else None
        v, info = fem.time_step(
            system, values[n - 1], load, drift, tp.mode,
            tol_picard=tp.picard_tol, max_picard=tp.picard_max,
        )
        values[n] = v
        full = load + (drift(v if tp.mode == "picard" else values[n - 1]) if drift else 0.0)
        res = system.residual(v, values[n - 1], full)
        scale = max(np.linalg.norm(system.rhs(values[n - 1], full)[system.free]), 1e-300)
        diags.append({
            "step": n, "t": float(t),
            "residual": float(np.linalg.norm(res[system.free]) / scale),
            "picard_iterations": info["picard_iterations"],
            "flux_jump": float(np.max(np.abs(res[op.interface_nodes]), initial=0.0)),
        })

    field_ = fem.TransientField(mesh, times, values)
    meta = {
        "eps": config.geometry.eps, "delta": config.drift.delta,
        "scalings": config.scalings.as_tuple(), "mesh_size": config.mesh.size,
        "n_vertices": mesh.n_vertices, "n_triangles": mesh.n_triangles,
        "dt": dt, "wall_ms": 1e3 * (time.perf_counter() - t0),
    }
    log.info("micro solve eps=%g delta=%g: %d vertices, %d steps", meta["eps"],
             meta["delta"], mesh.n_vertices, n_steps)
    return MicroSolution(config, field_, lifts, diags, meta)


def energy_report(sol: MicroSolution, exponents: ScalingExponents | None = None) -> dict:
    """Discrete counterparts of the scaled energy quantities.

    Returns a mapping with ``e1`` (weighted L2 norm squared at final time),
    ``e2`` (time-integrated weighted gradient norm squared), ``e3``
    (time-integrated weighted norm squared of backward difference quotients)
    and ``e4`` (weighted L2 norm squared of the drift at final time).
    """
    exps = exponents or sol.config.scalings
    a, b, gam, _ = exps.as_tuple()
    mesh = sol.mesh
    eps = sol.config.geometry.eps
    Mw = fem.assemble_mass(mesh, _region_weights(mesh, eps, a))
    Gw = fem.assemble_stiffness(mesh, (1.0, 1.0), _region_weights(mesh, eps, b))
    V = sol.field.values
    dt = sol.field.times[1] - sol.field.times[0] if len(sol.field.times) > 1 else 1.0
    e1 = float(V[-1] @ Mw @ V[-1])
    e2 = float(dt * np.einsum("ni,ni->", V[1:], (Gw @ V[1:].T).T))
    dV = np.diff(V, axis=0) / dt
    e3 = float(dt * np.einsum("ni,ni->", dV, (Mw @ dV.T).T))
    area, _ = fem.triangle_data(mesh)
    X = fem.quad_points(mesh)
    ub = sol.config.lift()(sol.field.times[-1], X)
    P = sol.config.drift(fem.at_quad(mesh, V[-1]) - ub)
    wg = _region_weights(mesh, eps, gam)
    e4 = float(np.sum(wg * area * ((P**2) @ fem.QUAD_W)))
    return {"e1": e1, "e2": e2, "e3": e3, "e4": e4}


def region_areas(mesh: TaggedMesh) -> dict[str, float]:
    return {r: mesh.region_area(r) for r in REGIONS}


__all__ = ["MicroSolution", "solve_micro", "energy_report", "build_micro_mesh", "region_areas"]
