"""Limit models for the four scaling classes.

* S1: bulk problems on both halves of the strip, one heat-type cell problem
  per interface point, coupled through Dirichlet traces and cell fluxes.
* S2: bulk problems sharing an interface line that carries capacity ``|Z|``.
* S3/S4: bulk problems outside a layer of fixed width whose points carry
  one-dimensional problems in the cell coordinate ``y2``.

All models are written for ``v = u + u_b`` and reuse the region operator of
the micro solver for the bulk parts, so the lift enters exactly as there.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import integrate

from . import fem
from .errors import DegenerateCellOperator, InterfaceIterationDiverged
from .geometry import TaggedMesh, cell_domain, cell_measure, rectangle_domain, triangulate
from .micro import RegionOperator
from .problem import ProblemConfig, assumption_status, lambda_switches

log = logging.getLogger(__name__)


# --------------------------------------------------------------------- helpers


def _sorted_tag_nodes(mesh: TaggedMesh, tag: str) -> np.ndarray:
    nodes = mesh.tag_vertices(tag)
    return nodes[np.argsort(mesh.vertices[nodes, 1], kind="stable")]


def _initial_bulk(config, op, mesh, region):
    v0 = config.sources.initial(region)(mesh.vertices) + op.nodal_lift(0.0)
    v0[op.dirichlet] = 0.0
    return v0


def _interface_transfer(mesh: TaggedMesh, tag: str, ys: np.ndarray) -> sp.csr_matrix:
    """Matrix mapping values at ``ys`` (piecewise linear in ``x2``) to ``int_tag g phi_i``."""
    cols = []
    for j in range(len(ys)):
        e = np.zeros(len(ys))
        e[j] = 1.0
        cols.append(fem.assemble_boundary_load(mesh, lambda x, e=e: np.interp(x[:, 1], ys, e), tag))
    return sp.csr_matrix(np.column_stack(cols))


def periodic_reduction(mesh: TaggedMesh, y0: float = 0.0, y1: float = 1.0) -> tuple[np.ndarray, sp.csr_matrix]:
    """Identify vertices on ``x2 = y1`` with those on ``x2 = y0``.

    Returns the vertex-to-dof map and the prolongation ``P`` (vertices x dofs).
    """
    v = mesh.vertices
    tol = 1e-10
    bottom = np.flatnonzero(np.abs(v[:, 1] - y0) < tol)
    top = np.flatnonzero(np.abs(v[:, 1] - y1) < tol)
    bottom = bottom[np.argsort(v[bottom, 0])]
    top = top[np.argsort(v[top, 0])]
    if len(bottom) != len(top) or np.max(np.abs(v[bottom, 0] - v[top, 0]), initial=0) > tol:
        raise ValueError("top and bottom vertices do not match")
    target = np.arange(mesh.n_vertices)
    target[top] = bottom
    keep = np.setdiff1d(np.arange(mesh.n_vertices), top)
    dof = -np.ones(mesh.n_vertices, dtype=np.int64)
    dof[keep] = np.arange(len(keep))
    vmap = dof[target]
    P = sp.csr_matrix((np.ones(mesh.n_vertices), (np.arange(mesh.n_vertices), vmap)),
                      shape=(mesh.n_vertices, len(keep)))
    return vmap, P


class CellProblem:
    """Heat-type problem on ``Z``, periodic in ``y2``, Dirichlet on ``Z_L``/``Z_R``.

    Several independent copies (one per interface point) are advanced at once
    as columns of a matrix. Values on ``Z_L`` and on ``Z_R`` are single scalars
    per copy.
    """

    def __init__(self, mesh: TaggedMesh, D_M, dt: float, tol_lin: float = 1e-10):
        self.mesh = mesh
        self.dt = dt
        self.vmap, self.P = periodic_reduction(mesh)
        X = fem.quad_points(mesh)
        D = D_M(X) if callable(D_M) else np.broadcast_to(np.asarray(D_M, float), X.shape)
        M = fem.assemble_mass(mesh)
        A = fem.assemble_stiffness(mesh, D)
        Pt = self.P.T.tocsr()
        self.M = (Pt @ M @ self.P).tocsr()
        self.A = (Pt @ A @ self.P).tocsr()
        self.K = (self.M / dt + self.A).tocsr()
        n = self.M.shape[0]
        self.zl = np.unique(self.vmap[mesh.tag_vertices("ZL")])
        self.zr = np.unique(self.vmap[mesh.tag_vertices("ZR")])
        mask = np.ones(n, dtype=bool)
        mask[self.zl] = False
        mask[self.zr] = False
        self.free = np.flatnonzero(mask)
        Kf = self.K[self.free]
        self._kL = np.asarray(Kf[:, self.zl].sum(axis=1)).ravel()
        self._kR = np.asarray(Kf[:, self.zr].sum(axis=1)).ravel()
        self._solver = fem.FactorizedSolver(Kf[:, self.free], tol_lin)
        self.X = X
        self.area, _ = fem.triangle_data(mesh)
        self.ones_load = self.M @ np.ones(n)

    @property
    def n_dofs(self) -> int:
        return self.M.shape[0]

    def load(self, values: np.ndarray) -> np.ndarray:
        """Reduced load ``int f phi`` for quadrature values ``(J, M, 3)`` or ``(M, 3)``."""
        vals = np.asarray(values, float)
        if vals.ndim == 2:
            vals = vals[None]
        out = np.empty((self.n_dofs, len(vals)))
        Pt = self.P.T
        for j, v in enumerate(vals):
            out[:, j] = Pt @ fem.assemble_source_load(self.mesh, v)
        return out

    def step(self, x_old, lam_l, lam_r, load):
        """Advance all copies; returns new values and the fluxes on ``Z_L``, ``Z_R``.

        The flux of a copy on ``Z_L`` is the sum over the ``Z_L`` dofs of the
        discrete residual, i.e. the variationally consistent boundary flux.
        """
        rhs = self.M @ x_old / self.dt + load
        x = np.empty_like(rhs)
        x[self.zl] = lam_l
        x[self.zr] = lam_r
        b = rhs[self.free] - np.outer(self._kL, lam_l) - np.outer(self._kR, lam_r)
        x[self.free] = self._solver.solve(b)
        res = self.K @ x - rhs
        return x, res[self.zl].sum(axis=0), res[self.zr].sum(axis=0)

    def expand(self, x_red: np.ndarray) -> np.ndarray:
        """Reduced dofs to vertex values (last axis)."""
        return x_red[..., self.vmap]

    def average(self, x_red: np.ndarray) -> np.ndarray:
        """``(1/|Z|) int_Z v dy`` per copy."""
        return (self.ones_load @ x_red) / self.ones_load.sum()


def solve_cell_problem_S1(
    cell_mesh: TaggedMesh,
    trace_l,
    trace_r,
    f_a0,
    h0,
    times: np.ndarray,
    D_M=(1.0, 1.0),
) -> fem.TransientField:
    """One cell problem driven by given traces.

    Parameters
    ----------
    trace_l, trace_r : array_like
        Dirichlet values on ``Z_L`` and ``Z_R`` at each time level.
    f_a0 : callable or float
        Source ``f(t, y)``.
    h0 : callable or float
        Initial value ``h(y)``.
    """
    times = np.asarray(times, float)
    dt = times[1] - times[0]
    cp = CellProblem(cell_mesh, D_M, dt)
    trace_l = np.broadcast_to(np.asarray(trace_l, float), times.shape)
    trace_r = np.broadcast_to(np.asarray(trace_r, float), times.shape)
    v = cell_mesh.vertices
    x0_full = h0(v) if callable(h0) else np.full(len(v), float(h0))
    keep = np.zeros(cp.n_dofs, dtype=np.int64)
    keep[cp.vmap] = np.arange(len(v))
    x = x0_full[keep][:, None]
    out = [cp.expand(x[:, 0])]
    for n in range(1, len(times)):
        fq = f_a0(times[n], cp.X) if callable(f_a0) else np.full(cp.X.shape[:2], float(f_a0))
        x, _, _ = cp.step(x, np.array([trace_l[n]]), np.array([trace_r[n]]), cp.load(fq))
        out.append(cp.expand(x[:, 0]))
    return fem.TransientField(cell_mesh, times, np.array(out))


def _bulk_mesh(config, x0, x1, side_tags, region, ys, size):
    dom = rectangle_domain(x0, x1, 0.0, config.geometry.h, side_tags=side_tags,
                           regions=((region, x0, x1),), y_breaks=ys[1:-1])
    return triangulate(dom, min(size, 0.5 * dom.min_feature), mirror_x=0.0)


def _drift_fn(op, config, t):
    return op.drift_load(t, config.drift) if op.has_drift else None


# ------------------------------------------------------------------------- S1


@dataclass
class MacroS1Solution:
    config: ProblemConfig
    left: fem.TransientField
    right: fem.TransientField
    lift_left: np.ndarray
    lift_right: np.ndarray
    sigma: np.ndarray
    cell_mesh: TaggedMesh
    cell_values: np.ndarray  # (n_times, n_sigma, n_cell_vertices)
    cell_average: np.ndarray  # (n_times, n_sigma)
    diagnostics: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.left.times

    def layer_average(self) -> np.ndarray:
        """Mean over the interface of the cell averages, per time level."""
        return integrate.trapezoid(self.cell_average, self.sigma, axis=1) / (self.sigma[-1] - self.sigma[0])


def solve_macro_S1(
    config: ProblemConfig,
    *,
    n_sigma: int | None = None,
    tol_iface: float = 1e-8,
    max_sweeps: int = 30,
    check: bool = True,
) -> MacroS1Solution:
    """Bulk problems plus per-point cell problems, coupled by interface sweeps.

    Each time step iterates: cell problems with the current trace guess, bulk
    problems with the resulting cell fluxes as Neumann data, new traces from
    the bulk. The trace update is relaxed with Aitken's dynamic factor. A
    step is accepted once the trace update and the flux change it would cause
    are both below ``tol_iface``.

    Raises
    ------
    InterfaceIterationDiverged
        If the trace update does not fall below ``tol_iface`` within
        ``max_sweeps`` sweeps.
    """
    if check:
        assumption_status(config)
    t0 = time.perf_counter()
    g = config.geometry
    mp = config.mesh
    tp = config.time
    n_sigma = n_sigma or mp.n_sigma
    ys = np.linspace(0.0, g.h, n_sigma)
    half = g.ell / 2
    meshL = _bulk_mesh(config, -half, 0.0, ("GammaL", "Sigma", "GammaH", "GammaH"), "Left", ys, mp.size)
    meshR = _bulk_mesh(config, 0.0, half, ("Sigma", "GammaR", "GammaH", "GammaH"), "Right", ys, mp.size)
    opL, opR = RegionOperator(config, meshL), RegionOperator(config, meshR)
    dt = tp.dt
    sysL = fem.AssembledSystem(opL.M, opL.A, dt, opL.dirichlet)
    sysR = fem.AssembledSystem(opR.M, opR.A, dt, opR.dirichlet)
    TL = _interface_transfer(meshL, "Sigma", ys)
    TR = _interface_transfer(meshR, "Sigma", ys)
    sigL = _sorted_tag_nodes(meshL, "Sigma")
    sigR = _sorted_tag_nodes(meshR, "Sigma")
    yL = meshL.vertices[sigL, 1]
    yR = meshR.vertices[sigR, 1]

    cmesh = triangulate(cell_domain(g.cell), mp.cell_size)
    cp = CellProblem(cmesh, config.coeffs.D_M_at, dt)
    # cell fluxes are affine in the two traces with copy-independent slopes
    zero = np.zeros((cp.n_dofs, 2))
    _, sl, sr = cp.step(zero, np.array([1.0, 0.0]), np.array([0.0, 1.0]), zero)
    dtn = np.array([sl, sr])
    lift = config.lift()
    xs = np.column_stack([np.zeros(n_sigma), ys])
    Yq = cp.X

    def cell_source(t, ub_rate):
        fm = config.sources.f_m
        vals = np.stack([fm(t, np.broadcast_to(x, Yq.shape), Yq) for x in xs])
        return cp.load(vals) + np.outer(cp.ones_load, ub_rate)

    n_steps = tp.n_steps
    times = dt * np.arange(n_steps + 1)
    VL = np.empty((n_steps + 1, meshL.n_vertices))
    VR = np.empty((n_steps + 1, meshR.n_vertices))
    UL = np.empty_like(VL)
    UR = np.empty_like(VR)
    UL[0] = opL.nodal_lift(0.0)
    UR[0] = opR.nodal_lift(0.0)
    VL[0] = _initial_bulk(config, opL, meshL, "Left")
    VR[0] = _initial_bulk(config, opR, meshR, "Right")
    hm = config.sources.initial("Middle")(xs) + lift(0.0, xs)
    xc = np.tile(hm, (cp.n_dofs, 1))
    cells = [xc]
    ub_sig = lift(0.0, xs)

    def traces(vl, vr):
        return np.interp(ys, yL, vl[sigL]), np.interp(ys, yR, vr[sigR])

    lam_l, lam_r = traces(VL[0], VR[0])
    diags = []
    for n in range(1, n_steps + 1):
        t = times[n]
        UL[n] = opL.nodal_lift(t)
        UR[n] = opR.nodal_lift(t)
        baseL = opL.source_load(t) + opL.M @ (UL[n] - UL[n - 1]) / dt + opL.A @ UL[n]
        baseR = opR.source_load(t) + opR.M @ (UR[n] - UR[n - 1]) / dt + opR.A @ UR[n]
        dL, dR = _drift_fn(opL, config, t), _drift_fn(opR, config, t)
        if dL is not None:
            baseL = baseL + dL(VL[n - 1])
        if dR is not None:
            baseR = baseR + dR(VR[n - 1])
        rhsL = sysL.rhs(VL[n - 1], baseL)
        rhsR = sysR.rhs(VR[n - 1], baseR)
        ub_new = lift(t, xs)
        cload = cell_source(t, (ub_new - ub_sig) / dt)
        ub_sig = ub_new

        lam = np.concatenate([lam_l, lam_r])
        omega = 1.0
        r_prev = None
        converged = False
        for sweep in range(1, max_sweeps + 1):
            xc_new, fl, fr = cp.step(cells[-1], lam[:n_sigma], lam[n_sigma:], cload)
            vl = sysL.solve(rhsL - TL @ fl)
            vr = sysR.solve(rhsR - TR @ fr)
            tl, tr = traces(vl, vr)
            r = np.concatenate([tl, tr]) - lam
            res = float(np.max(np.abs(r)))
            # flux change if the cells took the bulk traces instead
            dflux = float(np.max(np.abs(dtn @ r.reshape(2, -1))))
            if res < tol_iface and dflux < tol_iface:
                converged = True
                break
            if r_prev is not None:
                dr = r - r_prev
                denom = float(dr @ dr)
                if denom > 0:
                    omega = -omega * float(r_prev @ dr) / denom
            lam = lam + omega * r
            r_prev = r
        if not converged:
            raise InterfaceIterationDiverged(
                f"step {n}: trace residual {res:.3e}, flux change {dflux:.3e} "
                f"after {max_sweeps} sweeps"
            )
        # a-posteriori flux balance with the final bulk traces
        lam_final = np.concatenate([tl, tr])
        _, fl2, fr2 = cp.step(cells[-1], tl, tr, cload)
        flux_res = float(max(np.max(np.abs(fl2 - fl)), np.max(np.abs(fr2 - fr))))
        VL[n], VR[n] = vl, vr
        cells.append(xc_new)
        lam_l, lam_r = lam_final[:n_sigma], lam_final[n_sigma:]
        diags.append({"step": n, "t": float(t), "sweeps": sweep,
                      "matching_residual": res, "flux_residual": flux_res})

    cells = np.array(cells)
    sol = MacroS1Solution(
        config,
        fem.TransientField(meshL, times, VL),
        fem.TransientField(meshR, times, VR),
        UL, UR, ys, cmesh,
        cp.expand(np.transpose(cells, (0, 2, 1))),
        np.array([cp.average(c) for c in cells]),
        diags,
        {"n_sigma": n_sigma, "cell_vertices": cmesh.n_vertices,
         "bulk_vertices": meshL.n_vertices + meshR.n_vertices, "dt": dt,
         "delta": config.drift.delta, "wall_ms": 1e3 * (time.perf_counter() - t0)},
    )
    return sol


# ------------------------------------------------------------------------- S2


@dataclass
class MacroS2Solution:
    config: ProblemConfig
    field: fem.TransientField
    lift: np.ndarray
    sigma_nodes: np.ndarray
    sigma: np.ndarray
    diagnostics: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.field.times

    @property
    def interface(self) -> np.ndarray:
        """``v`` on the interface nodes, ``(n_times, n_nodes)`` sorted by ``x2``."""
        return self.field.values[:, self.sigma_nodes]

    def layer_average(self) -> np.ndarray:
        return integrate.trapezoid(self.interface, self.sigma, axis=1) / (self.sigma[-1] - self.sigma[0])


class _CellAverager:
    """Integrals over ``Z`` and ``dY0`` of layer data at given macro points."""

    def __init__(self, cmesh: TaggedMesh):
        self.mesh = cmesh
        self.Yq = fem.quad_points(cmesh)
        area, _ = fem.triangle_data(cmesh)
        self.w = area[:, None] * fem.QUAD_W[None, :]
        self.has_obstacle = "CellObstacle" in cmesh.tags()
        if self.has_obstacle:
            e = cmesh.tag_edges("CellObstacle")
            a, b = cmesh.vertices[e[:, 0]], cmesh.vertices[e[:, 1]]
            L = np.hypot(*(b - a).T)
            g = (0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3))
            self.Ye = np.concatenate([a + s * (b - a) for s in g])
            self.we = np.concatenate([0.5 * L, 0.5 * L])

    def volume(self, fn, t, x):
        """``int_Z fn(t, x, y) dy`` for each row of ``x``."""
        out = np.empty(len(x))
        for i, xi in enumerate(x):
            val = fn(t, np.broadcast_to(xi, self.Yq.shape), self.Yq)
            out[i] = np.sum(np.broadcast_to(val, self.w.shape) * self.w)
        return out

    def boundary(self, fn, t, x):
        """``int_{dY0} fn(t, x, y) ds_y`` for each row of ``x``."""
        if not self.has_obstacle:
            return np.zeros(len(x))
        out = np.empty(len(x))
        for i, xi in enumerate(x):
            val = fn(t, np.broadcast_to(xi, self.Ye.shape), self.Ye)
            out[i] = np.sum(np.broadcast_to(val, self.we.shape) * self.we)
        return out


def solve_macro_S2(
    config: ProblemConfig,
    *,
    n_sigma: int | None = None,
    couple_bulk: bool = True,
    check: bool = True,
) -> MacroS2Solution:
    """Bulk problems joined by an interface line with capacity ``|Z|``.

    Continuity across the interface is built into the shared interface nodes,
    so the interface equation is the row of those nodes in one monolithic
    system. With ``couple_bulk=False`` only the interface equation is solved
    (zero flux jump), which isolates the interface ODE.
    """
    if check:
        assumption_status(config)
    t0 = time.perf_counter()
    g = config.geometry
    mp = config.mesh
    tp = config.time
    n_sigma = n_sigma or mp.n_sigma
    ys = np.linspace(0.0, g.h, n_sigma)
    half = g.ell / 2
    dom = rectangle_domain(-half, half, 0.0, g.h,
                           regions=(("Left", -half, 0.0), ("Right", 0.0, half)),
                           interfaces=(("Sigma", 0.0),), y_breaks=ys[1:-1])
    mesh = triangulate(dom, min(mp.size, 0.25 * g.ell), mirror_x=0.0)
    op = RegionOperator(config, mesh)
    Zm = cell_measure(g.cell)
    Msig = fem.assemble_edge_mass(mesh, "Sigma", Zm)
    cmesh = triangulate(cell_domain(g.cell), mp.cell_size)
    sig_nodes = _sorted_tag_nodes(mesh, "Sigma")
    sig_y = mesh.vertices[sig_nodes, 1]
    xi_zero = abs(config.scalings.xi) <= 1e-12
    dt = tp.dt

    avg = _CellAverager(cmesh)
    src = config.sources

    def sigma_load(t):
        def fbar(x):
            val = avg.volume(src.f_m, t, x)
            if xi_zero:
                val = val - avg.boundary(src.g_0, t, x)
            return val
        return fem.assemble_boundary_load(mesh, fbar, "Sigma")

    n_steps = tp.n_steps
    times = dt * np.arange(n_steps + 1)
    V = np.empty((n_steps + 1, mesh.n_vertices))
    U = np.empty_like(V)
    U[0] = op.nodal_lift(0.0)
    V[0] = _initial_bulk(config, op, mesh, "Left")
    right = mesh.vertices[:, 0] > 0
    V[0, right] = (config.sources.initial("Right")(mesh.vertices[right]) + U[0, right])
    # interface initial value: cell average of the layer initial data
    xs = mesh.vertices[sig_nodes]
    V[0, sig_nodes] = config.sources.initial("Middle")(xs) + U[0, sig_nodes]
    V[0, op.dirichlet] = 0.0

    diags = []
    if couple_bulk:
        system = fem.AssembledSystem(op.M + Msig, op.A, dt, op.dirichlet)
    else:
        Ms = Msig[sig_nodes][:, sig_nodes]
        solver = fem.FactorizedSolver(Ms / dt)
    for n in range(1, n_steps + 1):
        t = times[n]
        U[n] = op.nodal_lift(t)
        dU = (U[n] - U[n - 1]) / dt
        if couple_bulk:
            load = (op.source_load(t) + (op.M + Msig) @ dU + op.A @ U[n] + sigma_load(t))
            drift = _drift_fn(op, config, t)
            v, info = fem.time_step(system, V[n - 1], load, drift, tp.mode,
                                    tol_picard=tp.picard_tol, max_picard=tp.picard_max)
            full = load + (drift(v if tp.mode == "picard" else V[n - 1]) if drift else 0.0)
            res = system.residual(v, V[n - 1], full)
            jump = float(np.max(np.abs(res[np.setdiff1d(sig_nodes, op.dirichlet)]), initial=0.0))
        else:
            load = sigma_load(t) + Msig @ dU
            rhs = Ms @ V[n - 1, sig_nodes] / dt + load[sig_nodes]
            v = np.zeros(mesh.n_vertices)
            v[sig_nodes] = solver.solve(rhs)
            jump = float(np.max(np.abs(Ms @ (v[sig_nodes] - V[n - 1, sig_nodes]) / dt
                                       - load[sig_nodes])))
        V[n] = v
        diags.append({"step": n, "t": float(t), "jump_residual": jump})

    return MacroS2Solution(
        config, fem.TransientField(mesh, times, V), U, sig_nodes, sig_y, diags,
        {"n_sigma": n_sigma, "vertices": mesh.n_vertices, "dt": dt, "cell_measure": Zm,
         "delta": config.drift.delta, "wall_ms": 1e3 * (time.perf_counter() - t0)},
    )


# ---------------------------------------------------------------------- S3/S4


class _LineProblem:
    """One-dimensional problem in ``y2`` for a fixed layer column ``x1``.

    The line is the periodic unit interval, or the interval ``[b2, 1 + a2]``
    when the column crosses the obstacle.
    """

    def __init__(self, idx, coords, periodic, d2, dt, lam1, lumped):
        self.idx = idx
        self.coords = coords
        n = len(idx)
        if periodic:
            e0 = np.arange(n)
            e1 = (e0 + 1) % n
            lengths = np.diff(np.r_[coords, coords[0] + 1.0])
        else:
            e0 = np.arange(n - 1)
            e1 = e0 + 1
            lengths = np.diff(coords)
        self.e0, self.e1, self.lengths = e0, e1, lengths
        self.mid = 0.5 * (coords[e0] + coords[e0] + lengths)
        self.n = n
        rows = np.r_[e0, e0, e1, e1]
        cols = np.r_[e0, e1, e0, e1]
        if lumped:
            mvals = np.r_[lengths / 2, 0 * lengths, 0 * lengths, lengths / 2]
        else:
            mvals = np.r_[lengths / 3, lengths / 6, lengths / 6, lengths / 3]
        self.M = sp.csr_matrix((mvals, (rows, cols)), shape=(n, n))
        k = lam1 * d2(self.mid) / lengths
        self.A = sp.csr_matrix((np.r_[k, -k, -k, k], (rows, cols)), shape=(n, n))
        self.solver = fem.FactorizedSolver(self.M / dt + self.A)
        self.ends = None if periodic else (0, n - 1)

    def load(self, f_mid_left, f_mid_right):
        """Two-point-per-element load from values at the element Gauss points."""
        out = np.zeros((self.n,) + f_mid_left.shape[1:])
        g0, g1 = (0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3))
        L = self.lengths.reshape((-1,) + (1,) * (f_mid_left.ndim - 1))
        np.add.at(out, self.e0, 0.5 * L * (f_mid_left * (1 - g0) + f_mid_right * (1 - g1)))
        np.add.at(out, self.e1, 0.5 * L * (f_mid_left * g0 + f_mid_right * g1))
        return out

    def drift_load(self, flux_mid):
        """``int b2 P phi'`` from per-element flux values ``b2 P``."""
        out = np.zeros((self.n,) + flux_mid.shape[1:])
        np.add.at(out, self.e0, -flux_mid)
        np.add.at(out, self.e1, flux_mid)
        return out


@dataclass
class MacroS3Solution:
    config: ProblemConfig
    left: fem.TransientField
    right: fem.TransientField
    lift_left: np.ndarray
    lift_right: np.ndarray
    layer_x1: np.ndarray
    layer_x2: np.ndarray
    layer_y: np.ndarray
    layer: np.ndarray  # (n_times, n_x1, n_x2, n_y), NaN inside the obstacle
    switches: tuple
    diagnostics: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.left.times


def solve_macro_S3S4(
    config: ProblemConfig,
    *,
    check: bool = True,
) -> MacroS3Solution:
    """Bulk problems outside ``|x1| < kappa`` and line problems in the layer.

    The switches ``(lambda1, lambda2)`` follow from the scaling class. With
    ``lambda1 = 0`` the line problems use a lumped mass matrix, so without
    drift every node evolves as an independent ODE.
    """
    if check:
        assumption_status(config)
    t0 = time.perf_counter()
    lam1, lam2 = lambda_switches(config.scalings)
    if lam1 == 0 and lam2 == 0:
        warnings.warn("lambda1 = lambda2 = 0: the layer reduces to pointwise ODEs",
                      DegenerateCellOperator, stacklevel=2)
    g = config.geometry
    k = g.kappa
    mp = config.mesh
    tp = config.time
    dt = tp.dt
    half = g.ell / 2
    size = mp.size
    domL = rectangle_domain(-half, -k, 0.0, g.h, side_tags=("GammaL", "BL", "GammaH", "GammaH"),
                            regions=(("Left", -half, -k),))
    domR = rectangle_domain(k, half, 0.0, g.h, side_tags=("BR", "GammaR", "GammaH", "GammaH"),
                            regions=(("Right", k, half),))
    meshL = triangulate(domL, min(size, 0.5 * domL.min_feature), mirror_x=0.0)
    meshR = triangulate(domR, min(size, 0.5 * domR.min_feature), mirror_x=0.0)
    opL, opR = RegionOperator(config, meshL), RegionOperator(config, meshR)
    sysL = fem.AssembledSystem(opL.M, opL.A, dt, opL.dirichlet)
    sysR = fem.AssembledSystem(opR.M, opR.A, dt, opR.dirichlet)
    bl = _sorted_tag_nodes(meshL, "BL")
    br = _sorted_tag_nodes(meshR, "BR")
    x2 = meshL.vertices[bl, 1]

    cell = g.cell
    x1 = np.linspace(-k, k, mp.layer_points)
    if cell is not None:
        x1 = np.unique(np.r_[x1, k * cell.a1, k * cell.b1])
    n1, n2 = len(x1), len(x2)
    ybr = [0.0, 1.0] + ([cell.a2, cell.b2] if cell is not None else [])
    ybr = sorted(set(ybr))
    yg = [0.0]
    for a, b in zip(ybr[:-1], ybr[1:]):
        m = max(int(np.ceil((b - a) / mp.cell_size - 1e-9)), 1)
        yg.extend((a + (b - a) * np.arange(1, m + 1) / m).tolist())
    yg = np.array(yg[:-1])  # drop y2 = 1, identified with 0
    ny = len(yg)

    coeffs = config.coeffs
    lumped = lam1 == 0
    lines = []
    for c in x1:
        y1 = c / k
        blocked = cell is not None and cell.a1 <= y1 <= cell.b1
        if blocked:
            ia = int(np.argmin(np.abs(yg - cell.a2)))
            ib = int(np.argmin(np.abs(yg - cell.b2)))
            idx = np.r_[np.arange(ib, ny), np.arange(0, ia + 1)]
            coords = np.r_[yg[ib:], yg[: ia + 1] + 1.0]
        else:
            idx = np.arange(ny)
            coords = yg.copy()

        def d2(y, y1=y1):
            pts = np.column_stack([np.full(len(y), y1), np.mod(y, 1.0)])
            return coeffs.D_M_at(pts)[:, 1]

        lines.append(_LineProblem(idx, coords, not blocked, d2, dt, lam1, lumped))

    lift = config.lift()
    drift = config.drift
    sources = config.sources
    gpts = (0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3))

    def cell_pts(line, c, s):
        y = line.coords[line.e0] + s * line.lengths
        return np.column_stack([np.full(len(y), c / k), np.mod(y, 1.0)])

    # mean of b1 over Z_L and Z_R for the bulk flux conditions
    yq = (np.arange(200) + 0.5) / 200
    b1L = float(coeffs.B_M_at(np.column_stack([-np.ones(200), yq]))[:, 0].mean())
    b1R = float(coeffs.B_M_at(np.column_stack([np.ones(200), yq]))[:, 0].mean())

    n_steps = tp.n_steps
    times = dt * np.arange(n_steps + 1)
    VL = np.empty((n_steps + 1, meshL.n_vertices))
    VR = np.empty((n_steps + 1, meshR.n_vertices))
    UL, UR = np.empty_like(VL), np.empty_like(VR)
    UL[0], UR[0] = opL.nodal_lift(0.0), opR.nodal_lift(0.0)
    VL[0] = _initial_bulk(config, opL, meshL, "Left")
    VR[0] = _initial_bulk(config, opR, meshR, "Right")
    layer = np.full((n_steps + 1, n1, n2, ny), np.nan)
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    XL = np.stack([X1, X2], -1)  # (n1, n2, 2)
    h0 = sources.initial("Middle")(XL) + lift(0.0, XL)
    state = []
    for i, line in enumerate(lines):
        st = np.tile(h0[i][None, :], (line.n, 1))
        state.append(st)
        layer[0, i][:, line.idx] = st.T
    ub_prev = lift(0.0, XL)

    def edge_flux(op_mesh, nodes, v, t, b1, sign):
        yv = op_mesh.vertices[nodes, 1]

        def fn(x):
            val = np.interp(x[:, 1], yv, v[nodes])
            return sign * lam2 * b1 * drift(val - lift(t, x))
        return fn

    diags = []
    for n in range(1, n_steps + 1):
        t = times[n]
        UL[n], UR[n] = opL.nodal_lift(t), opR.nodal_lift(t)
        loadL = opL.source_load(t) + opL.M @ (UL[n] - UL[n - 1]) / dt + opL.A @ UL[n]
        loadR = opR.source_load(t) + opR.M @ (UR[n] - UR[n - 1]) / dt + opR.A @ UR[n]
        if lam2:
            loadL -= fem.assemble_boundary_load(meshL, edge_flux(meshL, bl, VL[n - 1], t, b1L, 1.0), "BL")
            loadR -= fem.assemble_boundary_load(meshR, edge_flux(meshR, br, VR[n - 1], t, b1R, -1.0), "BR")
        VL[n], _ = fem.time_step(sysL, VL[n - 1], loadL, _drift_fn(opL, config, t), "lagged")
        VR[n], _ = fem.time_step(sysR, VR[n - 1], loadR, _drift_fn(opR, config, t), "lagged")

        ub_now = lift(t, XL)
        rate = (ub_now - ub_prev) / dt
        ub_prev = ub_now
        for i, line in enumerate(lines):
            c = x1[i]
            if i == 0 or i == n1 - 1:
                nodes, vv = (bl, VL[n]) if i == 0 else (br, VR[n])
                tr = np.interp(x2, (meshL if i == 0 else meshR).vertices[nodes, 1], vv[nodes])
                state[i] = np.tile(tr[None, :], (line.n, 1))
                layer[n, i][:, line.idx] = state[i].T
                continue
            xs = XL[i]  # (n2, 2)
            fvals = []
            for s in gpts:
                yp = cell_pts(line, c, s)  # (ne, 2)
                xx = np.broadcast_to(xs[None], (len(yp), n2, 2))
                yy = np.broadcast_to(yp[:, None], (len(yp), n2, 2))
                fvals.append(np.broadcast_to(sources.f_m(t, xx, yy), (len(yp), n2)))
            rhs = line.M @ (state[i] / dt + rate[i][None, :]) + line.load(*fvals)
            if lam2:
                vmid = 0.5 * (state[i][line.e0] + state[i][line.e1])
                ymid = cell_pts(line, c, 0.5)
                b2 = coeffs.B_M_at(ymid)[:, 1]
                flux = b2[:, None] * drift(vmid - ub_now[i][None, :])
                rhs = rhs + line.drift_load(flux)
            if line.ends is not None:
                for end in line.ends:
                    yend = np.array([[c / k, np.mod(line.coords[end], 1.0)]])
                    gv = sources.g_0(t, xs, np.broadcast_to(yend, xs.shape))
                    rhs[end] -= np.broadcast_to(gv, (n2,))
            state[i] = line.solver.solve(rhs)
            layer[n, i][:, line.idx] = state[i].T
        diags.append({"step": n, "t": float(t)})

    return MacroS3Solution(
        config, fem.TransientField(meshL, times, VL), fem.TransientField(meshR, times, VR),
        UL, UR, x1, x2, yg, layer, (lam1, lam2), diags,
        {"classification": config.classify(), "lambda1": lam1, "lambda2": lam2, "dt": dt,
         "wall_ms": 1e3 * (time.perf_counter() - t0)},
    )


def solve_macro(config: ProblemConfig, choice: str | None = None, **kw):
    """Dispatch on the scaling class (or an explicit ``choice``)."""
    choice = choice or config.classify()
    if choice == "S1":
        return solve_macro_S1(config, **kw)
    if choice == "S2":
        return solve_macro_S2(config, **kw)
    if choice in ("S3", "S4"):
        return solve_macro_S3S4(config, **kw)
    raise ValueError(f"no limit model for {choice!r}")
