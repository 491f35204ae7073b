"""Problem data: coefficients, sources, scaling exponents and the boundary lift.

Source closures use two signatures:

* bulk data ``f(t, x) -> array`` where ``x`` has shape ``(..., 2)``;
* layer data ``f(t, x, y) -> array`` where ``y`` are cell coordinates.

Dirichlet data ``U_L``, ``U_R`` use the bulk signature and are evaluated on
the vertical boundaries. Initial profiles are ``h(x)``. Closures must be pure.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .drift import RegularizedDrift
from .errors import AmbiguousClassification, ConfigError
from .geometry import FixedWidth, LayerGeometry, VanishingWidth, build_standard_cell

Field = Callable[..., Any]
_TOL = 1e-12


def _shape_of(x):
    return np.asarray(x, dtype=float).shape[:-1]


class Builtin:
    """Named source built from a short string or a tabulated grid.

    Accepted forms: ``zero``, ``constant:c``, ``affine:c0,c1,c2``
    (``c0 + c1 x1 + c2 x2``), ``ramp:c0,c1`` (``c0 + c1 t``),
    ``gaussian:amp,x1c,x2c,width`` and ``{"grid": {"x1": [...], "x2": [...],
    "values": [[...]]}}`` (bilinear interpolation, ``values[i][j]`` at
    ``(x1[i], x2[j])``).
    """

    def __init__(self, spec: Any):
        self.spec = spec
        self._grid = None
        if isinstance(spec, (int, float)):
            self.kind, self.params = "constant", [float(spec)]
        elif isinstance(spec, str):
            name, _, rest = spec.partition(":")
            self.kind = name.strip()
            self.params = [float(p) for p in rest.split(",")] if rest.strip() else []
            need = {"zero": 0, "constant": 1, "affine": 3, "ramp": 2, "gaussian": 4}
            if self.kind not in need:
                raise ConfigError(f"unknown source built-in {spec!r}")
            if len(self.params) != need[self.kind]:
                raise ConfigError(f"{self.kind} expects {need[self.kind]} parameters, got {spec!r}")
        elif isinstance(spec, dict) and "grid" in spec:
            g = spec["grid"]
            self.kind, self.params = "grid", []
            self._grid = RegularGridInterpolator(
                (np.asarray(g["x1"], float), np.asarray(g["x2"], float)),
                np.asarray(g["values"], float),
                method="linear", bounds_error=False, fill_value=None,
            )
        else:
            raise ConfigError(f"cannot interpret source {spec!r}")

    def __call__(self, t, x, y=None):
        x = np.asarray(x, dtype=float)
        shape = _shape_of(x)
        p = self.params
        if self.kind == "zero":
            return np.zeros(shape)
        if self.kind == "constant":
            return np.full(shape, p[0])
        if self.kind == "affine":
            return p[0] + p[1] * x[..., 0] + p[2] * x[..., 1]
        if self.kind == "ramp":
            return np.full(shape, p[0] + p[1] * t)
        if self.kind == "gaussian":
            r2 = (x[..., 0] - p[1]) ** 2 + (x[..., 1] - p[2]) ** 2
            return p[0] * np.exp(-r2 / (2 * p[3] ** 2))
        return self._grid(x.reshape(-1, 2)).reshape(shape)

    def __repr__(self):
        return f"Builtin({self.spec!r})"


def as_field(spec: Any) -> Field:
    """Return a callable for a number, string, grid dict or callable."""
    if callable(spec):
        return spec
    return Builtin(spec)


def _initial(fn: Field) -> Callable:
    """Adapt a source-style builtin to an initial profile ``h(x)``."""
    if isinstance(fn, Builtin):
        return lambda x: fn(0.0, x)
    return fn


@dataclass
class CoefficientSet:
    """Diagonal diffusion tensors and drift vectors.

    ``D_M`` and ``B_M`` are either constant pairs or cell functions of ``y``.
    """

    D_L: tuple = (1.0, 1.0)
    D_R: tuple = (1.0, 1.0)
    D_M: Any = (1.0, 1.0)
    B_L: tuple = (0.0, 0.0)
    B_R: tuple = (0.0, 0.0)
    B_M: Any = (0.0, 0.0)

    def D_M_at(self, y) -> np.ndarray:
        return _cell_eval(self.D_M, y)

    def B_M_at(self, y) -> np.ndarray:
        return _cell_eval(self.B_M, y)

    def theta(self, n: int = 41) -> float:
        y = _cell_samples(n)
        dm = self.D_M_at(y)
        return float(min(min(self.D_L), min(self.D_R), dm.min()))

    @property
    def drift_free(self) -> bool:
        zero_m = not callable(self.B_M) and all(b == 0 for b in self.B_M)
        return zero_m and all(b == 0 for b in self.B_L) and all(b == 0 for b in self.B_R)


def _cell_eval(spec, y):
    y = np.asarray(y, dtype=float)
    if callable(spec):
        return np.asarray(spec(y), dtype=float)
    return np.broadcast_to(np.asarray(spec, dtype=float), y.shape).copy()


def _cell_samples(n):
    g1 = np.linspace(-1, 1, n)
    g2 = np.linspace(0, 1, n)
    Y1, Y2 = np.meshgrid(g1, g2, indexing="ij")
    return np.stack([Y1, Y2], axis=-1).reshape(-1, 2)


@dataclass
class SourceData:
    """Sources, initial data and Dirichlet data.

    ``h`` is a global initial profile; ``h_l``, ``h_m``, ``h_r`` override it
    per region when given.
    """

    f_l: Any = "zero"
    f_r: Any = "zero"
    f_m: Any = "zero"
    g_l: Any = "zero"
    g_r: Any = "zero"
    g_0: Any = "zero"
    h: Any = "zero"
    h_l: Any = None
    h_m: Any = None
    h_r: Any = None
    U_L: Any = "zero"
    U_R: Any = "zero"

    def __post_init__(self):
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if val is not None:
                setattr(self, f.name, as_field(val))

    def initial(self, region: str) -> Callable:
        own = {"Left": self.h_l, "Middle": self.h_m, "Right": self.h_r}[region]
        return _initial(own if own is not None else self.h)


@dataclass(frozen=True)
class ScalingExponents:
    alpha: float
    beta: float
    gamma: float
    xi: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.xi)


@dataclass
class BoundaryLift:
    """Function ``u_b`` that is affine in ``x1`` and cancels the Dirichlet data."""

    ell: float
    U_L: Field
    U_R: Field
    fd_step: float = 1e-5

    def __post_init__(self):
        self.U_L = as_field(self.U_L)
        self.U_R = as_field(self.U_R)

    def _traces(self, t, x):
        x = np.asarray(x, dtype=float)
        xl = x.copy()
        xl[..., 0] = -self.ell / 2
        xr = x.copy()
        xr[..., 0] = self.ell / 2
        return self.U_L(t, xl), self.U_R(t, xr)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        ul, ur = self._traces(t, x)
        x1 = x[..., 0]
        half = self.ell / 2
        return ((x1 - half) / self.ell) * ul - ((x1 + half) / self.ell) * ur

    def grad(self, t, x):
        """``grad u_b``; the ``x1`` part is exact, the ``x2`` part uses central differences."""
        x = np.asarray(x, dtype=float)
        ul, ur = self._traces(t, x)
        g = np.empty(x.shape)
        g[..., 0] = (ul - ur) / self.ell
        e = np.zeros(2)
        e[1] = self.fd_step
        g[..., 1] = (self(t, x + e) - self(t, x - e)) / (2 * self.fd_step)
        return g

    def hess22(self, t, x):
        s = 1e-4
        e = np.array([0.0, s])
        return (self(t, x + e) - 2 * self(t, x) + self(t, x - e)) / s**2

    def dt(self, t, x):
        s = self.fd_step
        return (self(t + s, x) - self(t - s, x)) / (2 * s)


def boundary_lift_eval(lift: BoundaryLift, t: float, x) -> float:
    """Evaluate ``u_b(t, x)``."""
    out = lift(t, np.asarray(x, dtype=float))
    return out if np.ndim(out) else float(out)


@dataclass
class TransformedSources:
    """Data of the problem written for ``v = u + u_b``.

    The flux data ``g_b0``, ``g_bl``, ``g_br`` are vectors.
    """

    f_bl: Callable
    f_br: Callable
    f_am: Callable
    f_bm: Callable
    g_b0: Callable
    g_bl: Callable
    g_br: Callable
    h_bl: Callable
    h_bm: Callable
    h_br: Callable


def derive_transformed_sources(
    lift: BoundaryLift, coeffs: CoefficientSet, sources: SourceData
) -> TransformedSources:
    """Closures for the transformed data.

    ``f_bm`` and ``g_b0`` hold the cell variable ``y`` fixed, so for piecewise
    constant ``D_M`` they are the slow-variable derivatives.
    """
    DL = np.asarray(coeffs.D_L, float)
    DR = np.asarray(coeffs.D_R, float)

    def f_bl(t, x):
        return lift.dt(t, x) - DL[1] * lift.hess22(t, x) + sources.f_l(t, x)

    def f_br(t, x):
        return lift.dt(t, x) - DR[1] * lift.hess22(t, x) + sources.f_r(t, x)

    def f_am(t, x, y):
        return lift.dt(t, x) + sources.f_m(t, x, y)

    def f_bm(t, x, y):
        return -coeffs.D_M_at(y)[..., 1] * lift.hess22(t, x)

    def g_b0(t, x, y):
        return -coeffs.D_M_at(y) * lift.grad(t, x)

    def g_bl(t, x):
        return DL * lift.grad(t, x)

    def g_br(t, x):
        return DR * lift.grad(t, x)

    def _h(region):
        h = sources.initial(region)
        return lambda x: h(x) - lift(0.0, x)

    return TransformedSources(
        f_bl, f_br, f_am, f_bm, g_b0, g_bl, g_br, _h("Left"), _h("Middle"), _h("Right")
    )


def classify_scaling(exponents: ScalingExponents | tuple) -> str:
    """Scaling class ``S1``-``S4`` or ``Unclassified``."""
    a, b, g, x = exponents.as_tuple() if isinstance(exponents, ScalingExponents) else exponents
    tol = _TOL

    def eq(u, v):
        return abs(u - v) <= tol

    def ge(u, v):
        return u >= v - tol

    labels = []
    if eq(a, -1) and eq(b, 1) and ge(g, 1) and ge(x, 0.5):
        labels.append("S1")
    if eq(a, -1) and tol < b < 1 - tol and ge(g, b) and ge(x, min(b - 0.5, 0.0)):
        labels.append("S2")
    if a > -1 + tol and ge(g - a, 1) and ge(x - a, 1):
        if eq(b - a, 2):
            labels.append("S3")
        elif b - a > 1 + tol:
            labels.append("S4")
    if len(labels) > 1:
        raise AmbiguousClassification(f"{(a, b, g, x)} matches {labels}")
    return labels[0] if labels else "Unclassified"


def lambda_switches(exponents: ScalingExponents | tuple) -> tuple[int, int]:
    """``(lambda1, lambda2)`` for the fixed-width limit models."""
    t = exponents.as_tuple() if isinstance(exponents, ScalingExponents) else exponents
    cls = classify_scaling(t)
    if cls not in ("S3", "S4"):
        raise ValueError(f"switches are defined for S3/S4 only, got {cls}")
    lam1 = 1 if cls == "S3" else 0
    lam2 = 1 if abs(t[2] - t[0] - 1) <= _TOL else 0
    return lam1, lam2


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    severity: str = "error"


@dataclass
class TimeParams:
    T: float = 0.5
    dt: float = 0.01
    mode: str = "lagged"
    picard_tol: float = 1e-10
    picard_max: int = 50
    output_every: int = 0

    @property
    def n_steps(self) -> int:
        n = int(round(self.T / self.dt))
        if abs(n * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ConfigError(f"T={self.T} is not a multiple of dt={self.dt}")
        return n


@dataclass
class MeshParams:
    """Mesh resolution.

    ``size`` is the bulk edge length; the layer uses ``eps / layer_divisions``
    when that is finer. ``cell_size`` is the reference-cell edge length and
    ``n_sigma`` the number of interface points of the vanishing-width models.
    """

    size: float = 0.05
    layer_divisions: int = 8
    cell_size: float = 0.05
    n_sigma: int = 16
    layer_points: int = 9
    seed: int = 0


@dataclass
class ProblemConfig:
    geometry: LayerGeometry = field(default_factory=LayerGeometry)
    scalings: ScalingExponents = field(default_factory=lambda: ScalingExponents(-1, 1, 1, 1))
    coeffs: CoefficientSet = field(default_factory=CoefficientSet)
    sources: SourceData = field(default_factory=SourceData)
    drift: RegularizedDrift = field(
        default_factory=lambda: RegularizedDrift.from_config((0.0, 1.0, -1.0), 0.1)
    )
    time: TimeParams = field(default_factory=TimeParams)
    mesh: MeshParams = field(default_factory=MeshParams)
    acknowledge_warnings: bool = False

    def lift(self) -> BoundaryLift:
        return BoundaryLift(self.geometry.ell, self.sources.U_L, self.sources.U_R)

    def classify(self) -> str:
        return classify_scaling(self.scalings)

    def with_eps(self, eps: float) -> "ProblemConfig":
        return dataclasses.replace(self, geometry=dataclasses.replace(self.geometry, eps=eps))

    def with_delta(self, delta: float) -> "ProblemConfig":
        return dataclasses.replace(self, drift=self.drift.with_delta(delta))

    def summary(self) -> dict:
        """JSON-friendly description for run metadata."""
        g = self.geometry
        c = g.cell
        return {
            "geometry": {
                "ell": g.ell, "h": g.h, "eps": g.eps, "kappa": g.kappa,
                "obstacle": None if c is None else [c.a1, c.b1, c.a2, c.b2],
            },
            "scalings": dict(zip("alpha beta gamma xi".split(), self.scalings.as_tuple())),
            "classification": self.classify(),
            "drift": {"coeffs": list(self.drift.poly.coeffs), "delta": self.drift.delta,
                      "quadrature_nodes": self.drift.moll.nodes},
            "time": dataclasses.asdict(self.time),
            "mesh": dataclasses.asdict(self.mesh),
        }


def validate_assumptions(config: ProblemConfig, n: int = 21) -> list[Violation]:
    """Check ellipticity, boundedness and the exponent inequalities.

    For S3/S4 configurations the exponent inequalities are reported with
    severity ``warning`` together with the classification.
    """
    out: list[Violation] = []
    c = config.coeffs
    if not (c.theta() > 0):
        out.append(Violation("ellipticity θ>0", f"min diagonal entry is {c.theta()}"))
    ycell = _cell_samples(n)
    for name, val in (("B_L", c.B_L), ("B_R", c.B_R)):
        if not np.all(np.isfinite(np.asarray(val, float))):
            out.append(Violation("bounded drift", f"{name} is not finite"))
    if not np.all(np.isfinite(c.B_M_at(ycell))) or not np.all(np.isfinite(c.D_M_at(ycell))):
        out.append(Violation("bounded cell coefficients", "D_M or B_M not finite on samples"))

    g = config.geometry
    xs = np.stack(np.meshgrid(np.linspace(-g.ell / 2, g.ell / 2, n),
                              np.linspace(0, g.h, n), indexing="ij"), -1).reshape(-1, 2)
    s = config.sources
    lift = config.lift()
    for t in (0.0, config.time.T):
        checks = {
            "f_l": s.f_l(t, xs), "f_r": s.f_r(t, xs), "f_m": s.f_m(t, xs, ycell[: len(xs)]),
            "g_l": s.g_l(t, xs), "g_r": s.g_r(t, xs), "g_0": s.g_0(t, xs, ycell[: len(xs)]),
            "U_L": s.U_L(t, xs), "U_R": s.U_R(t, xs), "dt u_b": lift.dt(t, xs),
        }
        for name, val in checks.items():
            if not np.all(np.isfinite(val)):
                out.append(Violation("bounded data", f"{name} not finite at t={t}"))
    for region in ("Left", "Middle", "Right"):
        if not np.all(np.isfinite(s.initial(region)(xs))):
            out.append(Violation("bounded data", f"initial data on {region} not finite"))

    a, b, gam, xi = config.scalings.as_tuple()
    cls = config.classify()
    sev = "warning" if cls in ("S3", "S4") else "error"
    rules = [
        ("β≥0", b >= -_TOL, f"β={b}"),
        ("γ≥0", gam >= -_TOL, f"γ={gam}"),
        ("γ≥β", gam >= b - _TOL, f"γ={gam}<β={b}"),
        ("β≤ξ+½", b <= xi + 0.5 + _TOL, f"β={b}>ξ+½={xi + 0.5}"),
        ("α+½≤β", a + 0.5 <= b + _TOL, f"α+½={a + 0.5}>β={b}"),
        ("α+½≤ξ", a + 0.5 <= xi + _TOL, f"α+½={a + 0.5}>ξ={xi}"),
    ]
    for rule, ok, msg in rules:
        if not ok:
            extra = f" (classified {cls})" if sev == "warning" else ""
            out.append(Violation(rule, msg + extra, sev))
    return out


# ---------------------------------------------------------------- config I/O


def _pair(v, name):
    arr = [float(a) for a in v]
    if len(arr) != 2:
        raise ConfigError(f"{name} must have two entries")
    return tuple(arr)


def config_from_dict(d: dict) -> ProblemConfig:
    """Build a :class:`ProblemConfig` from a nested mapping (see README)."""
    known = {"geometry", "scalings", "coefficients", "sources", "drift", "time", "mesh",
             "acknowledge_warnings"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    gd = d.get("geometry", {})
    width = gd.get("width", "vanishing")
    if width == "vanishing":
        mode = VanishingWidth()
    elif isinstance(width, dict) and "fixed" in width:
        mode = FixedWidth(float(width["fixed"]))
    else:
        raise ConfigError(f"bad geometry.width {width!r}")
    obst = gd.get("obstacle", [-0.5, 0.5, 0.25, 0.75])
    cell = None if obst is None else build_standard_cell(*[float(v) for v in obst])
    geom = LayerGeometry(float(gd.get("ell", 2.0)), float(gd.get("h", 1.0)),
                         float(gd.get("eps", 0.25)), mode, cell)

    sd = d.get("scalings", {})
    try:
        scal = ScalingExponents(*(float(sd[k]) for k in ("alpha", "beta", "gamma", "xi")))
    except KeyError as exc:
        raise ConfigError(f"scalings missing {exc}") from None

    cd = d.get("coefficients", {})
    coeffs = CoefficientSet(
        **{k: _pair(cd[k], k) for k in ("D_L", "D_R", "D_M", "B_L", "B_R", "B_M") if k in cd}
    )
    src_keys = {f.name for f in dataclasses.fields(SourceData)}
    srcd = d.get("sources", {})
    bad = set(srcd) - src_keys
    if bad:
        raise ConfigError(f"unknown sources {sorted(bad)}")
    sources = SourceData(**srcd)

    dd = d.get("drift", {})
    drift = RegularizedDrift.from_config(
        dd.get("coeffs", [0.0, 1.0, -1.0]), float(dd.get("delta", 0.1)),
        int(dd.get("quadrature_nodes", 64)),
    )
    time = TimeParams(**d.get("time", {}))
    mesh = MeshParams(**d.get("mesh", {}))
    return ProblemConfig(geom, scal, coeffs, sources, drift, time, mesh,
                         bool(d.get("acknowledge_warnings", False)))


def load_config(path: str | Path) -> ProblemConfig:
    """Read a YAML or JSON configuration file."""
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        data = json.loads(text)
    else:
        import yaml

        data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(data)


def assumption_status(config: ProblemConfig) -> list[Violation]:
    """Run :func:`validate_assumptions` and apply the acknowledgement policy.

    Errors raise :class:`~thinlayer.errors.AssumptionViolation` unless
    ``config.acknowledge_warnings`` is set; warnings are emitted as
    :class:`~thinlayer.errors.AssumptionWarning`.
    """
    import warnings

    from .errors import AssumptionViolation, AssumptionWarning

    found = validate_assumptions(config)
    errors = [v for v in found if v.severity == "error"]
    if errors and not config.acknowledge_warnings:
        raise AssumptionViolation("; ".join(f"{v.rule}: {v.message}" for v in errors))
    for v in found:
        warnings.warn(f"{v.rule}: {v.message}", AssumptionWarning, stacklevel=3)
    return found


__all__ = [
    "Builtin", "as_field", "CoefficientSet", "SourceData", "ScalingExponents",
    "BoundaryLift", "boundary_lift_eval", "TransformedSources",
    "derive_transformed_sources", "classify_scaling", "lambda_switches",
    "Violation", "validate_assumptions", "assumption_status", "TimeParams",
    "MeshParams", "ProblemConfig", "config_from_dict", "load_config",
]
