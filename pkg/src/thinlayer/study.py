"""Parameter sweeps: micro against macro as eps -> 0, and delta -> 0 at either level.

Reports are written as ``report.csv`` with a fixed column set plus one JSON
record per sweep member under ``run_meta/``. Floating point numbers use a
fixed ``%.12e`` format so repeated studies give identical files. Wall-clock
times go to the JSON records always and into ``report.csv`` only on request.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import fem
from .errors import NonPositiveInput, RegionMismatch, SweepTooShort
from .geometry import TaggedMesh
from .macro import solve_macro
from .micro import MicroSolution, energy_report, solve_micro
from .problem import ProblemConfig

log = logging.getLogger(__name__)

COLUMNS = ("sweep_value", "err_L", "err_R", "err_layer_avg", "e1", "e2", "e3", "wall_ms")


# ---------------------------------------------------------------- sampling


class PointLocator:
    """Find the triangle containing each query point.

    Candidates come from a k-d tree over centroids and are confirmed with
    barycentric coordinates. Points outside every candidate get index ``-1``.
    """

    def __init__(self, mesh: TaggedMesh, region: str | None = None, k: int = 12):
        self.mesh = mesh
        tris = np.arange(mesh.n_triangles)
        if region is not None:
            tris = tris[mesh.regions == region]
        self.tris = tris
        p = mesh.vertices[mesh.triangles[tris]]
        self._p0 = p[:, 0]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        # inverse of [e1 e2] per triangle
        self._inv = np.stack([np.stack([e2[:, 1], -e2[:, 0]], -1),
                              np.stack([-e1[:, 1], e1[:, 0]], -1)], 1) / det[:, None, None]
        self._tree = cKDTree(p.mean(axis=1)) if len(tris) else None
        self.k = min(k, len(tris))

    def locate(self, pts: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
        """Triangle indices (global) and barycentric weights ``(n, 3)``."""
        pts = np.asarray(pts, float)
        n = len(pts)
        found = -np.ones(n, dtype=np.int64)
        bary = np.zeros((n, 3))
        if self._tree is None or n == 0:
            return found, bary
        _, cand = self._tree.query(pts, k=self.k)
        cand = cand.reshape(n, -1)
        for j in range(cand.shape[1]):
            todo = found < 0
            if not todo.any():
                break
            c = cand[todo, j]
            d = pts[todo] - self._p0[c]
            lam = np.einsum("nij,nj->ni", self._inv[c], d)
            l0 = 1.0 - lam.sum(axis=1)
            ok = (lam >= -tol).all(axis=1) & (l0 >= -tol)
            idx = np.flatnonzero(todo)[ok]
            found[idx] = self.tris[c[ok]]
            bary[idx] = np.column_stack([l0[ok], lam[ok]])
        return found, bary

    def sample(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Interpolate nodal ``values`` (``(..., n_vertices)``) at ``pts``; zero where not found."""
        tri, bary = self.locate(pts)
        ok = tri >= 0
        out = np.zeros(values.shape[:-1] + (len(pts),))
        nodes = self.mesh.triangles[tri[ok]]
        out[..., ok] = np.einsum("...nk,nk->...n", values[..., nodes], bary[ok])
        return out


def _quad_values(mesh: TaggedMesh, V: np.ndarray) -> np.ndarray:
    """Nodal series ``(n_t, n_vertices)`` at the quadrature points, ``(n_t, M, 3)``."""
    return np.einsum("tmk,qk->tmq", V[:, mesh.triangles], fem.QUAD_BARY)


def _quadrature(mesh: TaggedMesh, region: str | None):
    mask = np.ones(mesh.n_triangles, dtype=bool) if region is None else mesh.regions == region
    if not mask.any():
        raise RegionMismatch(f"region {region!r} not present on the target mesh")
    area, _ = fem.triangle_data(mesh)
    X = fem.quad_points(mesh)[mask]
    w = (area[mask, None] * fem.QUAD_W[None, :]).ravel()
    return X.reshape(-1, 2), w, mask


def _time_weights(times: np.ndarray, window) -> tuple[np.ndarray, np.ndarray]:
    sel = np.ones(len(times), dtype=bool)
    if window is not None:
        t0, t1 = window
        sel = (times >= t0 - 1e-12) & (times <= t1 + 1e-12)
    t = times[sel]
    if len(t) < 2:
        return sel, np.ones(len(t))
    w = np.zeros(len(t))
    dt = np.diff(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return sel, w


def _same_mesh(m1: TaggedMesh, m2: TaggedMesh) -> bool:
    if m1 is m2:
        return True
    return (m1.vertices.shape == m2.vertices.shape and m1.triangles.shape == m2.triangles.shape
            and np.array_equal(m1.vertices, m2.vertices)
            and np.array_equal(m1.triangles, m2.triangles))


def l2_error(
    a: fem.TransientField,
    b: fem.TransientField,
    region: str | None = None,
    window: tuple[float, float] | None = None,
    a_region: str | None = None,
) -> float:
    """Space-time L2 distance of ``a`` and ``b`` over a region of ``b``'s mesh.

    ``a`` is evaluated at the quadrature points of ``b`` by point location
    and linear interpolation. With ``a_region`` set, ``a`` is restricted to
    those triangles and extended by zero, which realizes the indicator
    extension of a field living on part of the region.

    Raises
    ------
    RegionMismatch
        If ``region`` is absent from ``b``'s mesh or the time grids differ.
    """
    X, w, mask = _quadrature(b.mesh, region)
    if a.values.shape[0] != b.values.shape[0] or not np.allclose(a.times, b.times):
        raise RegionMismatch("fields are stored on different time grids")
    sel, wt = _time_weights(b.times, window)
    if a_region is None and _same_mesh(a.mesh, b.mesh):
        A = _quad_values(b.mesh, a.values[sel])[:, mask].reshape(sel.sum(), -1)
    else:
        A = PointLocator(a.mesh, a_region).sample(a.values[sel], X)
    B = _quad_values(b.mesh, b.values[sel])[:, mask].reshape(sel.sum(), -1)
    sq = ((A - B) ** 2) @ w
    return float(np.sqrt(max(sq @ wt, 0.0)))


def time_l2(times: np.ndarray, series: np.ndarray) -> float:
    """``(int |s(t)|^2 dt)^(1/2)`` with the trapezoid rule."""
    _, wt = _time_weights(np.asarray(times, float), None)
    return float(np.sqrt(np.sum(wt * np.asarray(series, float) ** 2)))


def micro_layer_average(sol: MicroSolution) -> np.ndarray:
    """Mean of ``v`` over the perforated layer at each time level."""
    mesh = sol.mesh
    mask = mesh.regions == "Middle"
    area, _ = fem.triangle_data(mesh)
    w = (area[mask, None] * fem.QUAD_W[None, :])
    q = _quad_values(mesh, sol.field.values)[:, mask]
    return (q * w).sum(axis=(1, 2)) / w.sum()


def macro_layer_average(sol) -> np.ndarray:
    """Layer mean of a macro solution: cell averages, interface values or the layer grid."""
    if hasattr(sol, "layer_average"):
        return sol.layer_average()
    # fixed-width layer: mean over columns, x2 points and cell coordinate
    return np.nanmean(sol.layer, axis=(1, 2, 3))


# ----------------------------------------------------------------- reports


def fit_rate(values, parameters) -> float:
    """Least-squares slope of ``log(values)`` against ``log(parameters)``.

    Raises
    ------
    SweepTooShort
        With fewer than three points.
    NonPositiveInput
        If any value or parameter is not positive.
    """
    v = np.asarray(values, float)
    p = np.asarray(parameters, float)
    if len(v) < 3 or len(p) != len(v):
        raise SweepTooShort("a rate needs at least three points")
    if np.any(~(v > 0)) or np.any(~(p > 0)):
        raise NonPositiveInput("rates need positive values and parameters")
    slope, _ = np.polyfit(np.log(p), np.log(v), 1)
    return float(slope)


@dataclass
class ConvergenceReport:
    """Per-member errors, energies and timings of one sweep.

    ``labels`` names each member after the problem it solves
    (``P_eps^delta`` style), and ``extra`` keeps quantities that are not part
    of the CSV layout, such as whole-domain errors.
    """

    parameter: str
    values: list
    err_L: list
    err_R: list
    err_layer_avg: list
    e1: list
    e2: list
    e3: list
    wall_ms: list
    labels: list = field(default_factory=list)
    extra: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def rates(self) -> dict:
        """Fitted rates for each error column, ``nan`` where undefined."""
        out = {}
        pos = [i for i, v in enumerate(self.values) if v > 0]
        for name in ("err_L", "err_R", "err_layer_avg"):
            col = getattr(self, name)
            try:
                out[name] = fit_rate([col[i] for i in pos], [self.values[i] for i in pos])
            except (SweepTooShort, NonPositiveInput):
                out[name] = float("nan")
        return out

    def rows(self, timing: bool = False) -> list[list[str]]:
        rows = []
        for i, v in enumerate(self.values):
            nums = [v, self.err_L[i], self.err_R[i], self.err_layer_avg[i],
                    self.e1[i], self.e2[i], self.e3[i]]
            row = [f"{x:.12e}" for x in nums]
            row.append(f"{self.wall_ms[i]:.3f}" if timing else "")
            rows.append(row)
        return rows

    def write(self, out_dir: str | Path, timing: bool = False, meta_records: list | None = None) -> Path:
        """Write ``report.csv`` and ``run_meta/*.json`` to ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            w.writerows(self.rows(timing))
        md = out / "run_meta"
        md.mkdir(exist_ok=True)
        for i, rec in enumerate(meta_records or self.extra):
            name = f"member_{i:02d}.json"
            (md / name).write_text(json.dumps(_jsonable(rec), indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def read_report(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) if r[c] else np.nan for r in rows]) for c in COLUMNS}


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _bulk_pair(sol):
    """(left, right) transient fields of a macro solution."""
    if hasattr(sol, "left"):
        return sol.left, sol.right
    return sol.field, sol.field


def _member_meta(config, label, wall_ms, extra=None):
    rec = {"label": label, "config": config.summary(), "wall_ms": wall_ms}
    rec.update(extra or {})
    return rec


# ------------------------------------------------------------------ sweeps


def study_eps(
    config: ProblemConfig,
    eps_list,
    choice: str | None = None,
    *,
    workers: int = 1,
) -> ConvergenceReport:
    """Micro solutions for each ``eps`` against one macro solution.

    Bulk errors are ``||1_{Omega_L^eps} v_l^eps - v_l^0||`` over the macro
    left domain and the right analogue. The layer column compares the layer
    mean of the micro field with the layer mean of the macro model.

    Raises
    ------
    SweepTooShort
        With fewer than three values of ``eps``.
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3:
        raise SweepTooShort("an eps sweep needs at least three values")
    for e in eps_list:
        config.with_eps(e).geometry.check()
    t0 = time.perf_counter()
    macro = solve_macro(config, choice)
    macro_ms = 1e3 * (time.perf_counter() - t0)
    mL, mR = _bulk_pair(macro)
    m_avg = macro_layer_average(macro)

    def run(eps):
        cfg = config.with_eps(eps)
        s0 = time.perf_counter()
        sol = solve_micro(cfg)
        ms = 1e3 * (time.perf_counter() - s0)
        eL = l2_error(sol.field, mL, "Left", a_region="Left")
        eR = l2_error(sol.field, mR, "Right", a_region="Right")
        eM = time_l2(sol.field.times, micro_layer_average(sol) - m_avg)
        en = energy_report(sol)
        meta = _member_meta(cfg, "P_eps^delta", ms, {
            "eps": eps, "micro": sol.meta,
            "max_residual": max((d["residual"] for d in sol.diagnostics), default=0.0),
        })
        return eL, eR, eM, en, ms, meta

    results = _map(run, eps_list, workers)
    rep = ConvergenceReport(
        "eps", eps_list,
        [r[0] for r in results], [r[1] for r in results], [r[2] for r in results],
        [r[3]["e1"] for r in results], [r[3]["e2"] for r in results],
        [r[3]["e3"] for r in results], [r[4] for r in results],
        labels=["P_eps^delta"] * len(eps_list),
        extra=[r[5] for r in results],
        meta={"macro_choice": choice or config.classify(), "macro_wall_ms": macro_ms,
              "macro_meta": macro.meta},
    )
    log.info("eps study: %s", rep.rates())
    return rep


def _normalize_deltas(deltas) -> list[float]:
    vals = [float(d) for d in deltas]
    uniq = sorted(set(vals), reverse=True)
    if len(uniq) != len(vals):
        warnings.warn("duplicate delta values removed", UserWarning, stacklevel=3)
    if uniq[-1] != 0.0:
        raise ValueError("the delta list must contain 0")
    if uniq[0] <= 0.0:
        raise SweepTooShort("no positive delta values")
    return uniq


def study_delta(
    config: ProblemConfig,
    deltas,
    level: str = "micro",
    choice: str | None = None,
    *,
    workers: int = 1,
) -> ConvergenceReport:
    """Distance between the regularized and the non-regularized problem.

    Every positive ``delta`` is compared with ``delta = 0`` on the same mesh.
    ``extra[i]["err_total"]`` is the distance over the whole domain (micro)
    or over both bulk domains (macro).
    """
    ds = _normalize_deltas(deltas)
    if level not in ("micro", "macro"):
        raise ValueError("level must be 'micro' or 'macro'")

    def run(delta):
        cfg = config.with_delta(delta)
        s0 = time.perf_counter()
        sol = solve_micro(cfg) if level == "micro" else solve_macro(cfg, choice)
        return sol, 1e3 * (time.perf_counter() - s0)

    runs = _map(run, ds, workers)
    ref, _ = runs[-1]
    eL, eR, eM, e1, e2, e3, ms, extra, labels = [], [], [], [], [], [], [], [], []
    for delta, (sol, wall) in zip(ds[:-1], runs[:-1]):
        if level == "micro":
            a, b = sol.field, ref.field
            l_ = l2_error(a, b, "Left")
            r_ = l2_error(a, b, "Right")
            m_ = time_l2(a.times, micro_layer_average(sol) - micro_layer_average(ref))
            tot = l2_error(a, b, None)
            en = energy_report(sol)
            label = "P_eps^delta vs P_eps^0"
        else:
            aL, aR = _bulk_pair(sol)
            bL, bR = _bulk_pair(ref)
            l_ = l2_error(aL, bL, "Left")
            r_ = l2_error(aR, bR, "Right")
            m_ = time_l2(aL.times, macro_layer_average(sol) - macro_layer_average(ref))
            tot = float(np.hypot(l_, r_))
            en = {"e1": float("nan"), "e2": float("nan"), "e3": float("nan")}
            label = "P_0^delta vs P_0^0"
        eL.append(l_)
        eR.append(r_)
        eM.append(m_)
        e1.append(en["e1"])
        e2.append(en["e2"])
        e3.append(en["e3"])
        ms.append(wall)
        labels.append(label)
        extra.append(_member_meta(config.with_delta(delta), label, wall,
                                  {"delta": delta, "err_total": tot, "level": level}))
    return ConvergenceReport("delta", ds[:-1], eL, eR, eM, e1, e2, e3, ms, labels, extra,
                             {"level": level, "reference_wall_ms": runs[-1][1]})


def strictly_decreasing(values) -> bool:
    v = np.asarray(values, float)
    return bool(np.all(np.diff(v) < 0))


def diagram_audit(config: ProblemConfig, choice: str | None = None) -> dict:
    """Triangle-inequality check around the four problems of the delta/eps diagram.

    Solves ``P_eps^delta``, ``P_eps^0`` (micro) and ``P_0^0`` (macro) for the
    configured ``eps`` and ``delta`` and measures all three distances on the
    bulk quadrature points of the macro mesh.
    """
    a = solve_micro(config)
    b = solve_micro(config.with_delta(0.0))
    c = solve_macro(config.with_delta(0.0), choice)
    cL, cR = _bulk_pair(c)
    total = {"ab": 0.0, "bc": 0.0, "ac": 0.0}
    for region, cf in (("Left", cL), ("Right", cR)):
        X, w, mask = _quadrature(cf.mesh, region)
        _, wt = _time_weights(cf.times, None)
        A = PointLocator(a.mesh, region).sample(a.field.values, X)
        B = PointLocator(b.mesh, region).sample(b.field.values, X)
        C = _quad_values(cf.mesh, cf.values)[:, mask].reshape(len(cf.times), -1)
        for key, (u, v) in {"ab": (A, B), "bc": (B, C), "ac": (A, C)}.items():
            total[key] += float((((u - v) ** 2) @ w) @ wt)
    out = {k: float(np.sqrt(v)) for k, v in total.items()}
    out["holds"] = out["ac"] <= out["ab"] + out["bc"] + 1e-12
    return out


# -------------------------------------------------------------------- plots


def plot_report(csv_path: str | Path, svg_path: str | Path, parameter: str = "sweep value") -> Path:
    """Log-log plot of the error columns of a report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = read_report(csv_path)
    x = data["sweep_value"]
    # fixed element ids keep the SVG identical between runs
    matplotlib.rcParams["svg.hashsalt"] = "thinlayer"
    fig, ax = plt.subplots(figsize=(5, 4))
    for name in ("err_L", "err_R", "err_layer_avg"):
        y = data[name]
        ok = (x > 0) & (y > 0)
        if ok.any():
            ax.loglog(x[ok], y[ok], "o-", label=name)
    ax.set_xlabel(parameter)
    ax.set_ylabel("L2 error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(svg_path)
