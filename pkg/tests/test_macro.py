import warnings

import numpy as np
import pytest

from conftest import make_config
from thinlayer import fem
from thinlayer.errors import DegenerateCellOperator, InterfaceIterationDiverged
from thinlayer.geometry import build_standard_cell, cell_domain, cell_measure, triangulate
from thinlayer.macro import (
    CellProblem,
    solve_cell_problem_S1,
    solve_macro,
    solve_macro_S1,
    solve_macro_S2,
    solve_macro_S3S4,
)
from thinlayer.problem import classify_scaling, lambda_switches

S2 = {"alpha": -1, "beta": 0.5, "gamma": 0.5, "xi": 0}
STEADY = {"T": 400.0, "dt": 20.0}
CENTERED = build_standard_cell(-0.5, 0.5, 0.25, 0.75)


def _mirror_pairs(a, b):
    """Index pairs (i, j) with a[i] == mirror(b[j]) about x1 = 0."""
    ka = {(round(-x, 10), round(y, 10)): i for i, (x, y) in enumerate(a)}
    pairs = [(ka[(round(x, 10), round(y, 10))], j) for j, (x, y) in enumerate(b)]
    return np.array(pairs)


# ------------------------------------------------------------- cell problem


def test_cell_constant_state():
    mesh = triangulate(cell_domain(CENTERED), 0.1)
    f = solve_cell_problem_S1(mesh, 0.7, 0.7, 0.0, 0.7, np.linspace(0, 1, 6))
    assert np.abs(f.values - 0.7).max() < 1e-12


def test_cell_constant_state_has_no_flux():
    mesh = triangulate(cell_domain(CENTERED), 0.1)
    cp = CellProblem(mesh, (1.0, 2.0), 0.1)
    x = np.full((cp.n_dofs, 1), 0.3)
    _, fl, fr = cp.step(x, np.array([0.3]), np.array([0.3]), np.zeros((cp.n_dofs, 1)))
    assert abs(fl[0]) < 1e-13 and abs(fr[0]) < 1e-13


def test_cell_linear_profile_without_obstacle():
    mesh = triangulate(cell_domain(None), 0.1)
    f = solve_cell_problem_S1(mesh, 0.0, 1.0, 0.0, 0.0, np.linspace(0, 200, 21))
    y1 = mesh.vertices[:, 0]
    assert np.abs(f.final - (1 + y1) / 2).max() < 1e-10


def test_cell_self_convergence():
    times = np.linspace(0, 20, 41)

    def average(h):
        mesh = triangulate(cell_domain(CENTERED), h)
        M = fem.assemble_mass(mesh)
        v = solve_cell_problem_S1(mesh, 0.0, 0.0, 1.0, 0.0, times).final
        return (M @ v).sum() / M.sum()

    fine = average(0.025)
    e = [abs(average(h) - fine) for h in (0.1, 0.05)]
    assert e[0] <= 0.5 * 0.1**2 and e[1] <= 0.5 * 0.05**2
    assert e[0] / e[1] > 3.0


def test_cell_periodic_in_y2():
    mesh = triangulate(cell_domain(CENTERED), 0.1)
    # y2-dependent start decays to a y2-periodic state
    f = solve_cell_problem_S1(mesh, 0.0, 1.0, 0.0, lambda y: np.sin(2 * np.pi * y[:, 1]),
                              np.linspace(0, 1, 11))
    v = mesh.vertices
    bottom = np.flatnonzero(v[:, 1] == 0.0)
    for i in bottom:
        j = np.flatnonzero((v[:, 0] == v[i, 0]) & (v[:, 1] == 1.0))
        assert f.final[i] == f.final[j[0]]


# ----------------------------------------------------------------------- S1


def test_s1_zero_data():
    sol = solve_macro_S1(make_config())
    assert np.all(sol.left.values == 0) and np.all(sol.right.values == 0)
    assert np.all(sol.cell_values == 0)


def test_s1_constant_solution():
    c = 0.4
    sol = solve_macro_S1(make_config(sources={"U_L": c, "U_R": c, "h": c}))
    for f, lift in ((sol.left, sol.lift_left), (sol.right, sol.lift_right)):
        assert np.abs(f.values - lift - c).max() < 1e-9
    # v = u + u_b vanishes, so the cells carry zero as well
    assert np.abs(sol.cell_values).max() < 1e-9


def test_s1_mirror_symmetry():
    cfg = make_config(sources={"U_L": 1.0, "U_R": 1.0, "f_m": 1.0, "f_l": 0.5, "f_r": 0.5},
                      coefficients={"D_M": [1.0, 2.0]})
    sol = solve_macro_S1(cfg)
    pairs = _mirror_pairs(sol.left.mesh.vertices, sol.right.mesh.vertices)
    diff = sol.left.values[:, pairs[:, 0]] - sol.right.values[:, pairs[:, 1]]
    assert np.abs(diff).max() < 1e-8


def test_s1_matching_and_flux_balance():
    cfg = make_config(sources={"U_L": 1.0, "f_m": 1.0},
                      coefficients={"B_L": [0.5, 0.0], "B_R": [0.5, 0.0]})
    sol = solve_macro_S1(cfg)
    for d in sol.diagnostics:
        assert d["matching_residual"] < 1e-8
        assert d["flux_residual"] <= 10 * 1e-8
    # both bulk traces agree with the cell values on Z_L and Z_R
    zl = np.isclose(sol.cell_mesh.vertices[:, 0], -1.0)
    zr = np.isclose(sol.cell_mesh.vertices[:, 0], 1.0)
    for side, mask, field in (("L", zl, sol.left), ("R", zr, sol.right)):
        m = field.mesh
        nodes = m.tag_vertices("Sigma")
        nodes = nodes[np.argsort(m.vertices[nodes, 1])]
        trace = np.interp(sol.sigma, m.vertices[nodes, 1], field.final[nodes])
        np.testing.assert_allclose(sol.cell_values[-1][:, mask],
                                   np.repeat(trace[:, None], mask.sum(), 1), atol=1e-8)


def test_s1_iteration_budget():
    cfg = make_config(sources={"U_L": 1.0, "f_m": 1.0})
    with pytest.raises(InterfaceIterationDiverged):
        solve_macro_S1(cfg, max_sweeps=1)


def test_s1_steady_transmission_without_obstacle():
    # slabs of width 1, the cell (width 2 in y1, D = 1) and width 1 in series:
    # the drop 1 splits as 1/4, 1/2, 1/4
    cfg = make_config(geometry={"obstacle": None}, sources={"U_L": 1.0}, time=STEADY)
    sol = solve_macro_S1(cfg)
    for field, lift, expected in ((sol.left, sol.lift_left, 0.75), (sol.right, sol.lift_right, 0.25)):
        nodes = field.mesh.tag_vertices("Sigma")
        u = field.final[nodes] - lift[-1, nodes]
        assert np.abs(u - expected).max() < 1e-9


# ----------------------------------------------------------------------- S2


def test_s2_decoupled_interface_ode():
    v0, c0 = 0.5, 2.0
    cfg = make_config(scalings=S2, sources={"h_m": v0, "f_m": c0}, time={"T": 0.5, "dt": 0.05})
    sol = solve_macro_S2(cfg, couple_bulk=False)
    exact = v0 + c0 * sol.times[:, None]
    assert np.abs(sol.interface - exact).max() < 1e-10


@pytest.mark.parametrize("DL, DR", [((2.0, 1.0), (1.0, 1.0)), ((1.0, 1.0), (3.0, 0.5))])
def test_s2_series_resistance(DL, DR):
    UL, UR = 1.0, 0.25
    cfg = make_config(scalings=S2, sources={"U_L": UL, "U_R": UR}, time=STEADY,
                      coefficients={"D_L": list(DL), "D_R": list(DR)})
    sol = solve_macro_S2(cfg)
    u_sigma = sol.interface[-1] - sol.lift[-1, sol.sigma_nodes]
    # equal slab widths: flux continuity gives the D-weighted mean
    expected = (DL[0] * UL + DR[0] * UR) / (DL[0] + DR[0])
    assert np.abs(u_sigma - expected).max() < 1e-6


def test_s2_zero_data_and_jump_residual():
    sol = solve_macro_S2(make_config(scalings=S2))
    assert np.all(sol.field.values == 0)
    cfg = make_config(scalings=S2, sources={"U_L": 1.0, "f_m": 1.0})
    sol = solve_macro_S2(cfg)
    assert max(d["jump_residual"] for d in sol.diagnostics) < 1e-7


def test_s2_shrinking_obstacle_limit():
    base = dict(scalings=S2, sources={"U_L": 1.0, "U_R": 1.0, "f_m": 1.0},
                time={"T": 0.2, "dt": 0.02}, mesh={"cell_size": 0.05})
    ref = solve_macro_S2(make_config(geometry={"obstacle": None}, **base)).interface
    errs = []
    for w in (0.6, 0.3, 0.15):
        obst = [-w / 2, w / 2, 0.5 - w / 2, 0.5 + w / 2]
        sol = solve_macro_S2(make_config(geometry={"obstacle": obst}, **base))
        assert sol.meta["cell_measure"] == pytest.approx(2 - w * w)
        errs.append(np.abs(sol.interface - ref).max())
    assert errs[0] > errs[1] > errs[2]
    # the capacity defect scales with the obstacle area
    assert errs[2] < 0.1 * errs[0]


# -------------------------------------------------------------------- S3/S4

S3_DRIFT = {"alpha": 0, "beta": 2, "gamma": 1, "xi": 1}
S3_NODRIFT = {"alpha": 0, "beta": 2, "gamma": 2, "xi": 1}
S4_DRIFT = {"alpha": 0, "beta": 3, "gamma": 1, "xi": 1}
S4_NONE = {"alpha": 0, "beta": 3, "gamma": 2, "xi": 1}


def fixed(scalings, **kw):
    kw.setdefault("acknowledge_warnings", True)
    kw.setdefault("time", {"T": 0.1, "dt": 0.02})
    geometry = {"width": {"fixed": 0.25}, **kw.pop("geometry", {})}
    return make_config(geometry=geometry, scalings=scalings, **kw)


def test_s4_pointwise_ode():
    h0, c = 0.3, 1.5
    cfg = fixed(S4_NONE, sources={"h_m": h0, "f_m": c})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        with pytest.warns(DegenerateCellOperator):
            sol = solve_macro_S3S4(cfg, check=False)
    inner = sol.layer[:, 1:-1]
    expected = h0 + c * sol.times[:, None, None, None]
    mask = np.isfinite(inner)
    assert np.abs((inner - expected)[mask]).max() < 1e-12


def test_s3_y2_constant_without_obstacle():
    cfg = fixed(S3_NODRIFT, geometry={"obstacle": None},
                sources={"U_L": 1.0, "f_m": 1.0})
    sol = solve_macro_S3S4(cfg, check=False)
    assert np.all(np.isfinite(sol.layer))
    spread = np.nanmax(sol.layer, axis=-1) - np.nanmin(sol.layer, axis=-1)
    assert spread.max() < 1e-12


def test_s3_boundary_columns_follow_bulk():
    cfg = fixed(S3_DRIFT, sources={"U_L": 1.0, "f_m": 1.0},
                coefficients={"B_M": [0.3, 0.5]})
    sol = solve_macro_S3S4(cfg, check=False)
    m = sol.left.mesh
    nodes = m.tag_vertices("BL")
    nodes = nodes[np.argsort(m.vertices[nodes, 1])]
    np.testing.assert_allclose(sol.layer[-1, 0, :, 0], sol.left.final[nodes])
    # obstacle columns carry NaN exactly inside the hole
    blocked = np.isnan(sol.layer[-1]).any(axis=(1, 2))
    k = cfg.geometry.kappa
    assert np.array_equal(blocked, (sol.layer_x1 >= -0.5 * k) & (sol.layer_x1 <= 0.5 * k))


def test_drift_on_off_difference_is_bounded():
    kw = dict(sources={"U_L": 1.0, "f_m": 1.0, "h_m": 0.5}, coefficients={"B_M": [0.0, 0.8]})
    on = solve_macro_S3S4(fixed(S3_DRIFT, **kw), check=False)
    off = solve_macro_S3S4(fixed(S3_NODRIFT, **kw), check=False)
    assert on.switches == (1, 1) and off.switches == (1, 0)
    diff = np.nan_to_num(on.layer - off.layer)
    # b1 = 0, so the bulk fields do not see the drift
    np.testing.assert_allclose(on.left.values, off.left.values)
    dy = np.diff(np.r_[on.layer_y, 1.0]).min()
    cfg = on.config
    bound = cfg.time.T * 0.8 * cfg.drift.poly.sup_abs() * 2.0 / dy
    assert 0 < np.abs(diff).max() <= bound


@pytest.mark.parametrize("scal", [S3_DRIFT, S3_NODRIFT, S4_DRIFT, S4_NONE])
def test_lambda_audit(scal):
    cfg = fixed(scal, time={"T": 0.02, "dt": 0.02})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol = solve_macro(cfg, check=False)
    assert sol.meta["classification"] == classify_scaling(tuple(scal.values()))
    assert sol.switches == lambda_switches(tuple(scal.values()))


def test_dispatch_rejects_unclassified():
    cfg = make_config(scalings={"alpha": 0, "beta": 1.5, "gamma": 0.5, "xi": 1})
    with pytest.raises(ValueError):
        solve_macro(cfg, check=False)
