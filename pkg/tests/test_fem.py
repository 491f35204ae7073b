import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from thinlayer import fem
from thinlayer.errors import LinearSolveFailure, NonPositiveDiffusion, UnknownTag
from thinlayer.geometry import TaggedMesh, rectangle_domain, triangulate


def unit_square(h=0.25, jitter=0.0, seed=0):
    dom = rectangle_domain(0, 1, 0, 1, side_tags=("W", "E", "S", "N"))
    return triangulate(dom, h, jitter=jitter, seed=seed)


def one_triangle():
    # legs of length sqrt(2) give unit area
    s = np.sqrt(2.0)
    v = np.array([[0.0, 0.0], [s, 0.0], [0.0, s]])
    return TaggedMesh(v, np.array([[0, 1, 2]]), np.array(["Left"]),
                      np.zeros((0, 2), dtype=int), np.array([], dtype=str))


def gradients_by_plane_fit(mesh, v):
    """Per-triangle gradient of the linear interpolant from a 3x3 solve."""
    out = np.empty((mesh.n_triangles, 2))
    for k, tri in enumerate(mesh.triangles):
        p = mesh.vertices[tri]
        coef = np.linalg.solve(np.column_stack([np.ones(3), p]), v[tri])
        out[k] = coef[1:]
    return out


def test_single_triangle_mass():
    M = fem.assemble_mass(one_triangle()).toarray()
    np.testing.assert_allclose(M, (np.ones((3, 3)) + np.eye(3)) / 12, atol=1e-15)


def test_zero_weight_mass():
    assert fem.assemble_mass(unit_square(), 0.0).count_nonzero() == 0


def test_two_triangle_square_mass_sum():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    mesh = TaggedMesh(v, np.array([[0, 1, 2], [0, 2, 3]]), np.array(["Left", "Left"]),
                      np.zeros((0, 2), dtype=int), np.array([], dtype=str))
    assert fem.assemble_mass(mesh).sum() == pytest.approx(1.0)


def test_lumped_mass_keeps_row_sums():
    mesh = unit_square(jitter=0.2)
    M = fem.assemble_mass(mesh)
    L = fem.assemble_mass(mesh, lumped=True)
    np.testing.assert_allclose(np.asarray(L.sum(axis=1)).ravel(), np.asarray(M.sum(axis=1)).ravel())


def test_stiffness_kernel_and_energy():
    mesh = unit_square()
    A = fem.assemble_stiffness(mesh, (2.0, 1.0))
    assert np.abs(A @ np.ones(mesh.n_vertices)).max() < 1e-13
    x1 = mesh.vertices[:, 0]
    assert x1 @ A @ x1 == pytest.approx(2.0)
    assert abs(A - A.T).max() < 1e-14


def test_nonpositive_diffusion():
    with pytest.raises(NonPositiveDiffusion):
        fem.assemble_stiffness(unit_square(), (1.0, 0.0))


def test_discrete_ellipticity_random_mesh():
    mesh = unit_square(0.1, jitter=0.3, seed=3)
    rng = np.random.default_rng(4)
    D = rng.uniform(0.5, 3.0, (mesh.n_triangles, 2))
    theta = D.min()
    A = fem.assemble_stiffness(mesh, D)
    area = mesh.areas()
    for _ in range(100):
        v = rng.normal(size=mesh.n_vertices)
        g = gradients_by_plane_fit(mesh, v)
        grad_sq = np.sum(area * (g**2).sum(axis=1))
        assert v @ A @ v >= theta * grad_sq * (1 - 1e-12)


def test_drift_load_zero_cases():
    mesh = unit_square()
    P = np.ones((mesh.n_triangles, 3))
    assert np.all(fem.assemble_drift_load(mesh, (0.0, 0.0), P) == 0.0)
    from thinlayer.drift import RegularizedDrift

    drift = RegularizedDrift.from_config((0, 1, -1), 0.1)
    far = drift(np.full((mesh.n_triangles, 3), 1.5))
    assert np.all(fem.assemble_drift_load(mesh, (1.0, 0.3), far) == 0.0)


def test_drift_load_divergence_oracle():
    # int c d1(phi_i) = c (int_E phi_i - int_W phi_i) by the divergence theorem
    mesh = unit_square(0.2, jitter=0.25, seed=1)
    c = 0.7
    N = fem.assemble_drift_load(mesh, (1.0, 0.0), np.full((mesh.n_triangles, 3), c))
    oracle = c * (fem.assemble_boundary_load(mesh, 1.0, "E") - fem.assemble_boundary_load(mesh, 1.0, "W"))
    np.testing.assert_allclose(N, oracle, atol=1e-13)
    assert abs(N.sum()) < 1e-13


def test_boundary_load():
    mesh = unit_square()
    assert np.all(fem.assemble_boundary_load(mesh, 0.0, "S") == 0.0)
    assert fem.assemble_boundary_load(mesh, 1.0, "N").sum() == pytest.approx(1.0)
    assert fem.assemble_boundary_load(mesh, 1.0, "N", 0.25**2).sum() == pytest.approx(0.0625)
    # linear g is integrated exactly
    g = fem.assemble_boundary_load(mesh, lambda x: x[:, 0], "S")
    assert g.sum() == pytest.approx(0.5)
    with pytest.raises(UnknownTag):
        fem.assemble_boundary_load(mesh, 1.0, "Gamma0")


def test_edge_mass():
    mesh = unit_square()
    E = fem.assemble_edge_mass(mesh, "W", 3.0)
    assert E.sum() == pytest.approx(3.0)


def test_source_load_integrates_quadratics():
    mesh = unit_square(0.25, jitter=0.2, seed=2)
    X = fem.quad_points(mesh)
    F = fem.assemble_source_load(mesh, X[..., 0] ** 2)
    assert F.sum() == pytest.approx(1 / 3)


def test_pure_mass_step_is_identity():
    mesh = unit_square()
    M = fem.assemble_mass(mesh)
    sys_ = fem.AssembledSystem(M, sp.csr_matrix(M.shape), 0.1)
    v = np.random.default_rng(0).normal(size=mesh.n_vertices)
    out, _ = fem.time_step(sys_, v, np.zeros_like(v))
    np.testing.assert_allclose(out, v, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.floats(0, 10), st.floats(1e-3, 2), st.floats(-5, 5))
def test_scalar_implicit_euler(m, a, dt, v0):
    sys_ = fem.AssembledSystem(sp.csr_matrix([[m]]), sp.csr_matrix([[a]]), dt)
    out, _ = fem.time_step(sys_, np.array([v0]), np.zeros(1))
    assert out[0] == pytest.approx(v0 / (1 + a * dt / m), rel=1e-12, abs=1e-14)


def _drift_problem(dt, mode, T=0.4):
    from thinlayer.drift import RegularizedDrift

    mesh = unit_square(0.125)
    M = fem.assemble_mass(mesh)
    A = fem.assemble_stiffness(mesh, (1.0, 1.0))
    drift = RegularizedDrift.from_config((0, 1, -1), 0.1)
    system = fem.AssembledSystem(M, A, dt)
    x = mesh.vertices
    v = 0.5 + 0.4 * np.cos(np.pi * x[:, 0])

    def N(w):
        return fem.assemble_drift_load(mesh, (2.0, 0.5), drift(fem.at_quad(mesh, w)))

    for _ in range(int(round(T / dt))):
        v, info = fem.time_step(system, v, np.zeros_like(v), N, mode)
    return v, M, info


def test_lagged_and_picard_agree_at_first_order():
    gaps = []
    for dt in (0.1, 0.05, 0.025):
        lag, M, _ = _drift_problem(dt, "lagged")
        pic, _, info = _drift_problem(dt, "picard")
        assert info["picard_iterations"] >= 2
        d = lag - pic
        gaps.append(np.sqrt(d @ M @ d))
    orders = np.log2(np.array(gaps[:-1]) / np.array(gaps[1:]))
    # the coarsest pair is still pre-asymptotic
    assert np.all(orders > 0.7)
    assert abs(orders[-1] - 1.0) < 0.3


def test_picard_divergence_reported():
    mesh = unit_square(0.5)
    M = fem.assemble_mass(mesh)
    system = fem.AssembledSystem(M, fem.assemble_stiffness(mesh, (1.0, 1.0)), 1.0)
    v = np.ones(mesh.n_vertices)
    from thinlayer.errors import PicardDivergence

    with pytest.raises(PicardDivergence):
        fem.time_step(system, v, np.zeros_like(v), lambda w: 10.0 * np.cos(50 * w), "picard",
                      max_picard=3)


def test_linear_solve_cases():
    b = np.array([3.0, -1.0])
    np.testing.assert_array_equal(fem.linear_solve(sp.identity(2), b), b)
    np.testing.assert_allclose(fem.linear_solve(sp.diags([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0])
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(100, 100))
    A = Q @ Q.T + 100 * np.eye(100)
    rhs = rng.normal(size=100)
    x = fem.linear_solve(sp.csr_matrix(A), rhs)
    assert np.linalg.norm(A @ x - rhs) / np.linalg.norm(rhs) <= 1e-10
    np.testing.assert_array_equal(x, fem.linear_solve(sp.csr_matrix(A), rhs))


def test_linear_solve_singular():
    with pytest.raises(LinearSolveFailure):
        fem.linear_solve(sp.csr_matrix(np.zeros((3, 3))), np.ones(3))


def test_mass_conservation_without_dirichlet():
    mesh = unit_square(0.2, jitter=0.2, seed=5)
    M = fem.assemble_mass(mesh)
    A = fem.assemble_stiffness(mesh, (1.5, 0.5))
    system = fem.AssembledSystem(M, A, 0.05)
    v = np.random.default_rng(1).uniform(size=mesh.n_vertices)
    total = (M @ v).sum()
    for _ in range(20):
        v, _ = fem.time_step(system, v, np.zeros_like(v))
        assert abs((M @ v).sum() - total) <= 1e-10 * abs(total)


@pytest.mark.parametrize("dt", [1.0, 0.01])
@pytest.mark.parametrize("dirichlet", [False, True])
def test_M_norm_decay(dt, dirichlet):
    mesh = unit_square(0.2)
    M = fem.assemble_mass(mesh)
    A = fem.assemble_stiffness(mesh, (1.0, 2.0))
    fixed = mesh.tag_vertices("W", "E") if dirichlet else np.zeros(0, dtype=int)
    system = fem.AssembledSystem(M, A, dt, fixed)
    v = np.random.default_rng(2).normal(size=mesh.n_vertices)
    v[fixed] = 0.0
    norm = np.sqrt(v @ M @ v)
    for _ in range(100):
        v, _ = fem.time_step(system, v, np.zeros_like(v))
        new = np.sqrt(v @ M @ v)
        assert new <= norm * (1 + 1e-12)
        norm = new


def test_transient_field_shape_check():
    mesh = unit_square(0.5)
    with pytest.raises(ValueError):
        fem.TransientField(mesh, [0.0, 1.0], np.zeros((2, mesh.n_vertices + 1)))
