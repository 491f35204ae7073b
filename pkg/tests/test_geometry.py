import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thinlayer.errors import (
    DegenerateObstacle,
    FeatureUnderresolved,
    LayerTooWide,
    NonIntegerPeriodCount,
    ObstacleTouchesBoundary,
)
from thinlayer.geometry import (
    FixedWidth,
    LayerGeometry,
    VanishingWidth,
    build_micro_domain,
    build_standard_cell,
    cell_domain,
    cell_measure,
    read_mesh,
    rectangle_domain,
    triangulate,
    write_mesh,
)

CENTERED = (-0.5, 0.5, 0.25, 0.75)


def test_centered_cell_is_valid():
    c = build_standard_cell(*CENTERED)
    assert (c.a1, c.b1, c.a2, c.b2) == CENTERED


def test_obstacle_touching_bottom_rejected():
    with pytest.raises(ObstacleTouchesBoundary):
        build_standard_cell(-0.5, 0.5, 0.0, 0.75)


def test_reversed_obstacle_rejected():
    with pytest.raises(DegenerateObstacle):
        build_standard_cell(0.5, -0.5, 0.25, 0.75)


@pytest.mark.parametrize("obst, expected", [
    (CENTERED, 1.5),
    ((-0.01, 0.01, 0.49, 0.51), 2 - 0.02 * 0.02),
    ((-0.9, 0.9, 0.05, 0.95), 0.38),
])
def test_cell_measure(obst, expected):
    assert cell_measure(build_standard_cell(*obst)) == pytest.approx(expected, abs=1e-14)


def test_cell_measure_without_obstacle():
    assert cell_measure(None) == 2.0


def test_micro_domain_has_four_holes():
    geom = LayerGeometry(2.0, 1.0, 0.25, VanishingWidth(), build_standard_cell(*CENTERED))
    dom = build_micro_domain(geom)
    assert len(dom.holes) == 4
    for xa, xb, ya, yb in dom.holes:
        assert xb - xa == pytest.approx(0.25 * 1.0)
        assert yb - ya == pytest.approx(0.25 * 0.5)
    assert dict(dom.interfaces) == {"BL": -0.25, "BR": 0.25}


def test_non_integer_period_count():
    geom = LayerGeometry(2.0, 1.0, 0.3)
    with pytest.raises(NonIntegerPeriodCount):
        build_micro_domain(geom)


def test_layer_too_wide():
    geom = LayerGeometry(2.0, 1.0, 0.25, FixedWidth(1.0))
    with pytest.raises(LayerTooWide):
        build_micro_domain(geom)


def test_fixed_width_hole_positions():
    cell = build_standard_cell(*CENTERED)
    geom = LayerGeometry(2.0, 1.0, 0.25, FixedWidth(0.5), cell)
    expected = [(0.5 * cell.a1, 0.5 * cell.b1, 0.25 * (k + cell.a2), 0.25 * (k + cell.b2))
                for k in range(4)]
    np.testing.assert_allclose(build_micro_domain(geom).holes, expected, atol=1e-15)


def test_unit_square_mesh():
    mesh = triangulate(rectangle_domain(0, 1, 0, 1), 0.5)
    assert mesh.n_triangles >= 8
    assert abs(mesh.areas().sum() - 1.0) < 1e-12
    assert np.all(mesh.areas() > 0)


def test_cell_mesh_area_and_hole_resolution():
    cell = build_standard_cell(*CENTERED)
    mesh = triangulate(cell_domain(cell), 0.1)
    assert abs(mesh.areas().sum() - cell_measure(cell)) < 1e-10
    assert len(mesh.tag_edges("CellObstacle")) >= 8
    assert mesh.tag_length("ZL") == pytest.approx(1.0)
    assert mesh.tag_length("CellObstacle") == pytest.approx(2 * (1.0 + 0.5))


def test_underresolved_layer():
    geom = LayerGeometry(2.0, 1.0, 0.25)
    with pytest.raises(FeatureUnderresolved):
        triangulate(build_micro_domain(geom), 0.5)


def _micro_mesh(geom, size):
    return triangulate(build_micro_domain(geom), size, layer_edge_length=geom.eps / 4, mirror_x=0.0)


def test_micro_mesh_hole_edges_and_interfaces():
    geom = LayerGeometry(2.0, 1.0, 0.25)
    mesh = _micro_mesh(geom, 0.1)
    assert {"GammaL", "GammaR", "GammaH", "Gamma0", "BL", "BR"} <= mesh.tags()
    # every hole is surrounded by at least 8 Gamma0 edges
    e = mesh.tag_edges("Gamma0")
    mid = mesh.vertices[e].mean(axis=1)
    for xa, xb, ya, yb in geom.obstacles():
        near = ((mid[:, 0] >= xa - 1e-12) & (mid[:, 0] <= xb + 1e-12)
                & (mid[:, 1] >= ya - 1e-12) & (mid[:, 1] <= yb + 1e-12))
        assert near.sum() >= 8
    # interfaces are unions of mesh edges covering the full height
    assert mesh.tag_length("BL") == pytest.approx(1.0, abs=1e-12)
    assert mesh.tag_length("BR") == pytest.approx(1.0, abs=1e-12)


geometries = st.builds(
    lambda n, width, obst, fixed: LayerGeometry(
        2.0, 1.0, 1.0 / n,
        FixedWidth(fixed) if width else VanishingWidth(),
        build_standard_cell(*obst),
    ),
    st.integers(2, 6),
    st.booleans(),
    st.sampled_from([CENTERED, (-0.6, 0.2, 0.3, 0.6), (-0.25, 0.75, 0.2, 0.4)]),
    st.sampled_from([0.5, 0.6]),
)


@settings(max_examples=15, deadline=None)
@given(geometries)
def test_area_partition(geom):
    mesh = _micro_mesh(geom, 0.1)
    holes = sum((xb - xa) * (yb - ya) for xa, xb, ya, yb in geom.obstacles())
    parts = sum(mesh.region_area(r) for r in ("Left", "Middle", "Right"))
    assert abs(parts + holes - geom.ell * geom.h) < 1e-10
    assert abs(mesh.region_area("Middle") - geom.layer_area()) < 1e-10


def test_vanishing_layer_area_formula():
    cell = build_standard_cell(*CENTERED)
    for n in (4, 8):
        geom = LayerGeometry(2.0, 1.0, 1.0 / n, VanishingWidth(), cell)
        assert geom.layer_area() == pytest.approx(geom.eps * geom.h * cell_measure(cell))


def test_refinement_keeps_tag_lengths():
    geom = LayerGeometry(2.0, 1.0, 0.25)
    coarse = _micro_mesh(geom, 0.1)
    fine = triangulate(build_micro_domain(geom), 0.05, layer_edge_length=geom.eps / 8)
    for tag in coarse.tags():
        assert abs(coarse.tag_length(tag) - fine.tag_length(tag)) <= 1e-10


def test_mesh_roundtrip(tmp_path):
    geom = LayerGeometry(2.0, 1.0, 0.5)
    mesh = _micro_mesh(geom, 0.25)
    write_mesh(mesh, tmp_path / "m.txt")
    back = read_mesh(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.regions, mesh.regions)
    np.testing.assert_array_equal(back.edge_tags, mesh.edge_tags)


def test_to_cell_maps_into_reference_cell():
    geom = LayerGeometry(2.0, 1.0, 0.25)
    y = geom.to_cell(np.array([[0.125, 0.3], [-0.25, 0.99]]))
    np.testing.assert_allclose(y, [[0.5, 0.2], [-1.0, 0.96]])
