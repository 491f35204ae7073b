"""Reference cell, perforated strip and tagged triangulations.

Every domain handled here is a rectangle with axis-aligned rectangular holes,
so the triangulation is built on a tensor grid whose lines pass through every
geometric breakpoint (hole edges, internal interfaces, extra horizontal
lines). Quadrilaterals inside holes are dropped and the rest are split into
two triangles. Boundaries are therefore represented exactly and the mesh is a
deterministic function of its inputs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateObstacle,
    FeatureUnderresolved,
    LayerTooWide,
    NonIntegerPeriodCount,
    ObstacleTouchesBoundary,
)

_TOL = 1e-12

BOUNDARY_TAGS = (
    "GammaL", "GammaR", "GammaH", "Gamma0", "BL", "BR",
    "ZL", "ZR", "CellObstacle", "CellOuter",
)
REGION_TAGS = ("Left", "Middle", "Right", "Cell")


@dataclass(frozen=True)
class StandardCell:
    """Obstacle rectangle ``[a1, b1] x [a2, b2]`` inside ``Y = (-1, 1) x (0, 1)``."""

    a1: float
    b1: float
    a2: float
    b2: float

    @property
    def obstacle_area(self) -> float:
        return (self.b1 - self.a1) * (self.b2 - self.a2)


def build_standard_cell(a1: float, b1: float, a2: float, b2: float) -> StandardCell:
    """Validate the obstacle bounds and return the cell.

    Raises
    ------
    DegenerateObstacle
        If ``a1 >= b1`` or ``a2 >= b2``.
    ObstacleTouchesBoundary
        If the obstacle is not strictly inside ``Y``.
    """
    if not (a1 < b1 and a2 < b2):
        raise DegenerateObstacle(f"empty obstacle [{a1},{b1}]x[{a2},{b2}]")
    if not (-1.0 < a1 and b1 < 1.0 and 0.0 < a2 and b2 < 1.0):
        raise ObstacleTouchesBoundary(
            f"obstacle [{a1},{b1}]x[{a2},{b2}] must lie strictly inside (-1,1)x(0,1)"
        )
    return StandardCell(float(a1), float(b1), float(a2), float(b2))


def cell_measure(cell: StandardCell | None) -> float:
    """Area of ``Z = Y \\ Y0``; a missing obstacle gives ``|Y| = 2``."""
    if cell is None:
        return 2.0
    return 2.0 - cell.obstacle_area


@dataclass(frozen=True)
class VanishingWidth:
    """Layer half-width equal to the period, ``kappa(eps) = eps``."""

    def kappa(self, eps: float) -> float:
        return eps


@dataclass(frozen=True)
class FixedWidth:
    """Layer half-width independent of the period."""

    value: float

    def kappa(self, eps: float) -> float:
        return self.value


@dataclass(frozen=True)
class LayerGeometry:
    """Strip ``(-ell/2, ell/2) x (0, h)`` with a perforated layer around ``x1 = 0``.

    ``cell=None`` describes an un-perforated layer, which is convenient for
    verification runs.
    """

    ell: float = 2.0
    h: float = 1.0
    eps: float = 0.25
    width_mode: VanishingWidth | FixedWidth = field(default_factory=VanishingWidth)
    cell: StandardCell | None = field(
        default_factory=lambda: StandardCell(-0.5, 0.5, 0.25, 0.75)
    )

    @property
    def kappa(self) -> float:
        return self.width_mode.kappa(self.eps)

    @property
    def n_periods(self) -> int:
        return int(round(self.h / self.eps))

    def check(self) -> None:
        ratio = self.h / self.eps
        if self.eps <= 0 or ratio < 0.5 or abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise NonIntegerPeriodCount(f"h/eps = {ratio!r} is not a positive integer")
        if self.kappa >= self.ell / 2:
            raise LayerTooWide(f"kappa = {self.kappa} >= ell/2 = {self.ell / 2}")

    def obstacles(self) -> list[tuple[float, float, float, float]]:
        """Obstacle rectangles ``(x1a, x1b, x2a, x2b)``, one per period."""
        if self.cell is None:
            return []
        k, e, c = self.kappa, self.eps, self.cell
        return [
            (k * c.a1, k * c.b1, e * (i + c.a2), e * (i + c.b2))
            for i in range(self.n_periods)
        ]

    def layer_area(self) -> float:
        """``|Omega_M|`` from the closed-form expression."""
        holes = 0.0
        if self.cell is not None:
            holes = self.n_periods * self.kappa * self.eps * self.cell.obstacle_area
        return 2 * self.kappa * self.h - holes

    def to_cell(self, x: np.ndarray) -> np.ndarray:
        """Map physical points in the layer to cell coordinates ``y``."""
        x = np.asarray(x, dtype=float)
        y = np.empty_like(x)
        y[..., 0] = x[..., 0] / self.kappa
        y[..., 1] = np.mod(x[..., 1] / self.eps, 1.0)
        return y


@dataclass(frozen=True)
class DomainDescription:
    """Rectangle with rectangular holes plus tagging rules.

    Attributes
    ----------
    x0, x1, y0, y1 : float
        Outer rectangle.
    holes : tuple
        Hole rectangles ``(xa, xb, ya, yb)``.
    interfaces : tuple
        Internal vertical lines ``(tag, x)`` that must be unions of mesh edges.
    regions : tuple
        ``(name, xlo, xhi)``; a triangle belongs to the range containing its centroid.
    side_tags : tuple
        Tags for the left, right, bottom and top sides.
    hole_tag : str
        Tag for hole boundaries.
    band : tuple or None
        ``(tag, xlo, xhi)``; bottom/top edges inside this x-range get ``tag``.
    refine : tuple or None
        ``(xlo, xhi)`` x-range meshed with the layer edge length.
    y_breaks : tuple
        Extra horizontal grid lines.
    min_feature : float
        Smallest feature the mesh must resolve.
    """

    x0: float
    x1: float
    y0: float
    y1: float
    holes: tuple = ()
    interfaces: tuple = ()
    regions: tuple = ()
    side_tags: tuple = ("GammaL", "GammaR", "GammaH", "GammaH")
    hole_tag: str = "Gamma0"
    band: tuple | None = None
    refine: tuple | None = None
    y_breaks: tuple = ()
    min_feature: float = 0.0
    kind: str = "rect"

    @property
    def area(self) -> float:
        outer = (self.x1 - self.x0) * (self.y1 - self.y0)
        return outer - sum((xb - xa) * (yb - ya) for xa, xb, ya, yb in self.holes)


def rectangle_domain(
    x0: float,
    x1: float,
    y0: float,
    y1: float,
    *,
    side_tags: Sequence[str] = ("GammaL", "GammaR", "GammaH", "GammaH"),
    regions: Sequence[tuple] | None = None,
    interfaces: Sequence[tuple] = (),
    y_breaks: Sequence[float] = (),
) -> DomainDescription:
    """Plain rectangle; the default region spans the whole rectangle as ``Left``."""
    if regions is None:
        regions = (("Left", x0, x1),)
    return DomainDescription(
        x0, x1, y0, y1,
        interfaces=tuple(interfaces),
        regions=tuple(regions),
        side_tags=tuple(side_tags),
        y_breaks=tuple(float(v) for v in y_breaks),
        min_feature=min(x1 - x0, y1 - y0),
    )


def build_micro_domain(geom: LayerGeometry) -> DomainDescription:
    """Polygonal description of the perforated strip.

    Raises
    ------
    NonIntegerPeriodCount, LayerTooWide
        If the geometry is inadmissible.
    """
    geom.check()
    k = geom.kappa
    half = geom.ell / 2
    ybreaks = [geom.eps * i for i in range(1, geom.n_periods)]
    return DomainDescription(
        -half, half, 0.0, geom.h,
        holes=tuple(geom.obstacles()),
        interfaces=(("BL", -k), ("BR", k)),
        regions=(("Left", -half, -k), ("Middle", -k, k), ("Right", k, half)),
        side_tags=("GammaL", "GammaR", "GammaH", "GammaH"),
        hole_tag="Gamma0",
        # the top and bottom pieces of the layer belong to the layer boundary
        band=("Gamma0", -k, k),
        refine=(-k, k),
        y_breaks=tuple(ybreaks),
        min_feature=min(k, geom.eps),
        kind="micro",
    )


def cell_domain(cell: StandardCell | None) -> DomainDescription:
    """The reference cell ``Z`` with tags ZL, ZR, CellOuter and CellObstacle."""
    holes: tuple = ()
    feature = 1.0
    if cell is not None:
        holes = ((cell.a1, cell.b1, cell.a2, cell.b2),)
        feature = min(
            cell.a1 + 1, 1 - cell.b1, cell.a2, 1 - cell.b2,
            cell.b1 - cell.a1, cell.b2 - cell.a2,
        )
    return DomainDescription(
        -1.0, 1.0, 0.0, 1.0,
        holes=holes,
        regions=(("Cell", -1.0, 1.0),),
        side_tags=("ZL", "ZR", "CellOuter", "CellOuter"),
        hole_tag="CellObstacle",
        min_feature=feature,
        kind="cell",
    )


@dataclass
class TaggedMesh:
    """Conforming triangulation with per-triangle regions and tagged edges."""

    vertices: np.ndarray
    triangles: np.ndarray
    regions: np.ndarray
    edges: np.ndarray
    edge_tags: np.ndarray
    domain: DomainDescription | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def region_area(self, region: str) -> float:
        return float(self.areas()[self.regions == region].sum())

    def tags(self) -> set[str]:
        return set(self.edge_tags.tolist())

    def tag_edges(self, tag: str) -> np.ndarray:
        return self.edges[self.edge_tags == tag]

    def tag_length(self, tag: str) -> float:
        e = self.tag_edges(tag)
        d = self.vertices[e[:, 1]] - self.vertices[e[:, 0]]
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    def tag_vertices(self, *tags: str) -> np.ndarray:
        mask = np.isin(self.edge_tags, tags)
        return np.unique(self.edges[mask].ravel())

    def region_vertices(self, region: str) -> np.ndarray:
        return np.unique(self.triangles[self.regions == region].ravel())


def _axis_nodes(breaks, size_of, min_div_of):
    pts = [breaks[0]]
    on_break = [True]
    for a, b in zip(breaks[:-1], breaks[1:]):
        n = max(int(math.ceil((b - a) / size_of(a, b) - 1e-9)), min_div_of(a, b))
        inner = a + (b - a) * np.arange(1, n) / n
        pts.extend(inner.tolist())
        on_break.extend([False] * (n - 1))
        pts.append(b)
        on_break.append(True)
    return np.array(pts), np.array(on_break)


def _unique_sorted(values):
    vals = sorted(values)
    out = [vals[0]]
    for v in vals[1:]:
        if v - out[-1] > 1e-12 * max(1.0, abs(v)):
            out.append(v)
    return out


def triangulate(
    domain: DomainDescription,
    edge_length: float,
    *,
    layer_edge_length: float | None = None,
    seed: int | None = None,
    jitter: float = 0.0,
    mirror_x: float | None = None,
) -> TaggedMesh:
    """Triangulate ``domain`` with target edge length ``edge_length``.

    Parameters
    ----------
    domain : DomainDescription
    edge_length : float
        Target spacing of the tensor grid.
    layer_edge_length : float, optional
        Spacing inside ``domain.refine`` and for all horizontal grid lines.
    seed, jitter : optional
        With ``jitter > 0`` grid nodes that do not lie on a breakpoint line are
        displaced by up to ``jitter`` times the local spacing (capped at 0.2),
        using a generator seeded with ``seed``.
    mirror_x : float, optional
        Diagonals are mirrored about this vertical line so that mirror-symmetric
        domains get mirror-symmetric meshes. Defaults to the domain center.

    Raises
    ------
    FeatureUnderresolved
        If the edge length used where the features sit (the refined band,
        or everywhere without one) exceeds half of ``domain.min_feature``.
    """
    if edge_length <= 0:
        raise ValueError("edge_length must be positive")
    fine = layer_edge_length if layer_edge_length is not None else edge_length
    fine = min(fine, edge_length)
    # features live inside the refined band when there is one
    resolving = fine if domain.refine is not None else edge_length
    if domain.min_feature > 0 and resolving > 0.5 * domain.min_feature + 1e-14:
        raise FeatureUnderresolved(
            f"edge length {resolving} exceeds half the smallest feature "
            f"{domain.min_feature}"
        )

    xb = [domain.x0, domain.x1] + [x for _, x in domain.interfaces]
    yb = [domain.y0, domain.y1] + list(domain.y_breaks)
    for xa, xbb, ya, ybb in domain.holes:
        xb += [xa, xbb]
        yb += [ya, ybb]
    if domain.refine is not None:
        xb += list(domain.refine)
    xb = _unique_sorted(xb)
    yb = _unique_sorted(yb)
    hole_x = [(h[0], h[1]) for h in domain.holes]
    hole_y = [(h[2], h[3]) for h in domain.holes]

    def is_side(a, b, sides):
        return any(abs(a - s0) < _TOL and abs(b - s1) < _TOL for s0, s1 in sides)

    def xsize(a, b):
        if domain.refine is not None:
            lo, hi = domain.refine
            if a >= lo - _TOL and b <= hi + _TOL:
                return fine
        return edge_length

    xs, xon = _axis_nodes(xb, xsize, lambda a, b: 2 if is_side(a, b, hole_x) else 1)
    ysize = fine if layer_edge_length is not None else edge_length
    ys, yon = _axis_nodes(yb, lambda a, b: ysize, lambda a, b: 2 if is_side(a, b, hole_y) else 1)

    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    if jitter > 0:
        rng = np.random.default_rng(seed)
        amp = min(jitter, 0.2)
        dx = np.diff(xs)
        dy = np.diff(ys)
        hx = np.minimum(np.r_[dx[0], dx], np.r_[dx, dx[-1]])
        hy = np.minimum(np.r_[dy[0], dy], np.r_[dy, dy[-1]])
        jx = rng.uniform(-1, 1, size=(nx, ny)) * amp * hx[:, None] * (~xon)[:, None]
        jy = rng.uniform(-1, 1, size=(nx, ny)) * amp * hy[None, :] * (~yon)[None, :]
        verts = verts + np.column_stack([jx.ravel(), jy.ravel()])

    def vid(i, j):
        return i * ny + j

    I, J = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    cx = 0.5 * (xs[I] + xs[I + 1])
    cy = 0.5 * (ys[J] + ys[J + 1])
    keep = np.ones(len(I), dtype=bool)
    for xa, xbb, ya, ybb in domain.holes:
        keep &= ~((cx > xa) & (cx < xbb) & (cy > ya) & (cy < ybb))
    I, J, cx = I[keep], J[keep], cx[keep]
    p00, p10 = vid(I, J), vid(I + 1, J)
    p11, p01 = vid(I + 1, J + 1), vid(I, J + 1)
    axis = 0.5 * (domain.x0 + domain.x1) if mirror_x is None else mirror_x
    left = cx < axis
    tri = np.concatenate([
        np.column_stack([p00, p10, p11])[left],
        np.column_stack([p00, p11, p01])[left],
        np.column_stack([p00, p10, p01])[~left],
        np.column_stack([p10, p11, p01])[~left],
    ])
    # deterministic ordering by quad then position
    order = np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))
    tri = tri[order]

    used = np.unique(tri.ravel())
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = verts[used]
    tri = remap[tri]

    cent = verts[tri].mean(axis=1)
    regions = np.full(len(tri), domain.regions[0][0] if domain.regions else "Left", dtype=object)
    for name, lo, hi in domain.regions:
        regions[(cent[:, 0] > lo) & (cent[:, 0] < hi)] = name
    regions = regions.astype(str)

    edges, tags = _tag_edges(verts, tri, domain, xs, ys)
    return TaggedMesh(verts, tri, regions, edges, tags, domain)


def _tag_edges(verts, tri, domain, xs, ys):
    all_edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    all_edges.sort(axis=1)
    uniq, counts = np.unique(all_edges, axis=0, return_counts=True)
    boundary = uniq[counts == 1]
    interior = uniq[counts == 2]
    a = verts[boundary[:, 0]]
    b = verts[boundary[:, 1]]
    mid = 0.5 * (a + b)
    scale = max(domain.x1 - domain.x0, domain.y1 - domain.y0)
    tol = 1e-10 * scale
    tags = np.full(len(boundary), domain.hole_tag, dtype=object)
    vertical = np.abs(a[:, 0] - b[:, 0]) < tol
    horizontal = np.abs(a[:, 1] - b[:, 1]) < tol
    lt, rt, bt, tt = domain.side_tags
    bottom = horizontal & (np.abs(mid[:, 1] - domain.y0) < tol)
    top = horizontal & (np.abs(mid[:, 1] - domain.y1) < tol)
    tags[bottom] = bt
    tags[top] = tt
    if domain.band is not None:
        btag, lo, hi = domain.band
        inband = (mid[:, 0] > lo) & (mid[:, 0] < hi)
        tags[(bottom | top) & inband] = btag
    tags[vertical & (np.abs(mid[:, 0] - domain.x0) < tol)] = lt
    tags[vertical & (np.abs(mid[:, 0] - domain.x1) < tol)] = rt

    out_edges = [boundary]
    out_tags = [tags]
    for tag, x in domain.interfaces:
        ia = verts[interior[:, 0]]
        ib = verts[interior[:, 1]]
        on = (np.abs(ia[:, 0] - x) < tol) & (np.abs(ib[:, 0] - x) < tol)
        out_edges.append(interior[on])
        out_tags.append(np.full(on.sum(), tag, dtype=object))
    edges = np.concatenate(out_edges)
    tags = np.concatenate(out_tags).astype(str)
    return edges, tags


def write_mesh(mesh: TaggedMesh, path: str | Path) -> None:
    """Write the plain-text mesh format.

    The header is ``vertices N / triangles M / edges K``, followed by ``N``
    lines ``x y``, ``M`` lines ``i j k region`` and ``K`` lines ``i j tag``.
    Indices are zero-based.
    """
    with open(path, "w") as fh:
        fh.write(
            f"vertices {mesh.n_vertices} / triangles {mesh.n_triangles} / edges {len(mesh.edges)}\n"
        )
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for (i, j, k), r in zip(mesh.triangles, mesh.regions):
            fh.write(f"{i} {j} {k} {r}\n")
        for (i, j), t in zip(mesh.edges, mesh.edge_tags):
            fh.write(f"{i} {j} {t}\n")


def read_mesh(path: str | Path) -> TaggedMesh:
    """Inverse of :func:`write_mesh`."""
    with open(path) as fh:
        head = fh.readline().split()
        n, m, k = int(head[1]), int(head[4]), int(head[7])
        verts = np.array([[float(v) for v in fh.readline().split()] for _ in range(n)])
        tri, reg = [], []
        for _ in range(m):
            parts = fh.readline().split()
            tri.append([int(p) for p in parts[:3]])
            reg.append(parts[3])
        edges, tags = [], []
        for _ in range(k):
            parts = fh.readline().split()
            edges.append([int(p) for p in parts[:2]])
            tags.append(parts[2])
    return TaggedMesh(
        verts.reshape(n, 2),
        np.array(tri, dtype=np.int64).reshape(m, 3),
        np.array(reg, dtype=str),
        np.array(edges, dtype=np.int64).reshape(k, 2),
        np.array(tags, dtype=str),
    )


def write_tag_stats(mesh: TaggedMesh, path: str | Path) -> None:
    """CSV with one row per edge tag and per region."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "tag", "count", "measure"])
        for tag in sorted(mesh.tags()):
            w.writerow(["edge", tag, int((mesh.edge_tags == tag).sum()), f"{mesh.tag_length(tag):.12e}"])
        for reg in sorted(set(mesh.regions.tolist())):
            w.writerow(["region", reg, int((mesh.regions == reg).sum()), f"{mesh.region_area(reg):.12e}"])
