"""Truncated polynomial drift, its mollifier and the regularized drift.

``P(r)`` is a polynomial on ``[0, 1]`` and zero elsewhere, so it may jump at
``r = 0`` and ``r = 1``. It is smoothed by convolution with the scaled bump

    rho_delta(x) = rho(x / delta) / delta,  rho(x) = C exp(1 / (x^2 - 1)) on |x| < 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import integrate


@dataclass(frozen=True)
class DriftPolynomial:
    """Coefficients ``a0, ..., am`` of ``P(r) = sum a_k r^k`` on ``[0, 1]``."""

    coeffs: tuple[float, ...]

    def __post_init__(self):
        if len(self.coeffs) == 0:
            raise ValueError("coefficient list must be nonempty")
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    def poly(self, r):
        """The polynomial itself, without truncation."""
        return np.polynomial.polynomial.polyval(r, self.coeffs)

    def sup_abs(self, n: int = 2001) -> float:
        r = np.linspace(0.0, 1.0, n)
        crit = np.polynomial.polynomial.polyroots(
            np.polynomial.polynomial.polyder(self.coeffs)
        ) if len(self.coeffs) > 2 else np.array([])
        crit = np.real(crit[np.isreal(crit)])
        crit = crit[(crit >= 0) & (crit <= 1)]
        return float(np.max(np.abs(self.poly(np.concatenate([r, crit])))))

    @property
    def is_zero(self) -> bool:
        return all(c == 0.0 for c in self.coeffs)


def eval_P(poly: DriftPolynomial, r):
    """Evaluate the truncated polynomial; zero outside ``[0, 1]``."""
    r = np.asarray(r, dtype=float)
    out = np.where((r >= 0.0) & (r <= 1.0), poly.poly(r), 0.0)
    return out if out.ndim else float(out)


def _bump(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    xi = x[inside]
    out[inside] = np.exp(1.0 / (xi * xi - 1.0))
    return out


@lru_cache(maxsize=1)
def mollifier_constant() -> float:
    """Normalization ``C`` with ``int rho = 1``."""
    val, _ = integrate.quad(
        lambda s: float(np.exp(1.0 / (s * s - 1.0))), -1.0, 1.0,
        epsabs=1e-14, epsrel=1e-13, limit=200,
    )
    return 1.0 / val


@dataclass(frozen=True)
class Mollifier:
    """Scaled bump ``rho_delta`` with a Gauss-Legendre rule for convolutions.

    ``delta = 0`` switches regularization off.
    """

    delta: float
    nodes: int = 64
    C: float = field(init=False)

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        object.__setattr__(self, "C", mollifier_constant())

    def rule(self) -> tuple[np.ndarray, np.ndarray]:
        return np.polynomial.legendre.leggauss(self.nodes)

    def sup(self) -> float:
        return self.C * np.exp(-1.0) / self.delta


def eval_mollifier(moll: Mollifier, x, scaled: bool = False):
    """``rho(x)``, or ``rho_delta(x)`` when ``scaled`` is true."""
    x = np.asarray(x, dtype=float)
    if scaled:
        out = moll.C * _bump(x / moll.delta) / moll.delta
    else:
        out = moll.C * _bump(x)
    return out if out.ndim else float(out)


def eval_P_delta(poly: DriftPolynomial, moll: Mollifier, r):
    """Regularized drift ``P_delta(r) = int rho_delta(y) P(r - y) dy``.

    With ``s = y / delta`` the integrand ``rho(s) P(r - delta s)`` is nonzero
    only for ``s`` in ``[(r - 1)/delta, r/delta]``. The Gauss-Legendre rule is
    mapped onto that window intersected with ``(-1, 1)``, so the jumps of
    ``P`` never fall inside a quadrature panel.
    """
    r = np.asarray(r, dtype=float)
    if moll.delta == 0.0:
        return eval_P(poly, r)
    d = moll.delta
    lo = np.clip((r - 1.0) / d, -1.0, 1.0)
    hi = np.clip(r / d, -1.0, 1.0)
    t, w = moll.rule()
    half = 0.5 * (hi - lo)
    s = 0.5 * (hi + lo)[..., None] + half[..., None] * t
    vals = moll.C * _bump(s) * poly.poly(r[..., None] - d * s)
    out = half * (vals @ w)
    return out if out.ndim else float(out)


def p_delta_l2_distance(
    poly: DriftPolynomial,
    moll: Mollifier,
    interval: tuple[float, float] | None = None,
    panels: int = 400,
) -> float:
    """``||P_delta - P||_{L2}`` over ``interval`` by panel Gauss-Legendre quadrature.

    Panel edges include every kink of ``P`` and ``P_delta``.
    """
    d = moll.delta
    if d == 0.0 or poly.is_zero:
        return 0.0
    a, b = interval if interval is not None else (-d, 1.0 + d)
    if a > -d or b < 1.0 + d:
        raise ValueError("interval must contain (-delta, 1 + delta)")
    brk = sorted({p for p in (a, b, -d, 0.0, d, 1.0 - d, 1.0, 1.0 + d) if a <= p <= b})
    t, w = np.polynomial.legendre.leggauss(10)
    total = 0.0
    for lo, hi in zip(brk[:-1], brk[1:]):
        if hi - lo <= 0:
            continue
        edges = np.linspace(lo, hi, max(2, int(panels * (hi - lo)) + 1))
        mids = 0.5 * (edges[:-1] + edges[1:])
        halves = 0.5 * np.diff(edges)
        x = (mids[:, None] + halves[:, None] * t).ravel()
        diff = eval_P_delta(poly, moll, x) - eval_P(poly, x)
        total += float(np.sum((diff.reshape(-1, len(t)) ** 2) @ w * halves))
    return float(np.sqrt(total))


def lipschitz_bound(poly: DriftPolynomial, moll: Mollifier) -> float:
    """``sup rho_delta * 2 sup|P|``, a Lipschitz constant for ``P_delta``."""
    return moll.sup() * 2.0 * poly.sup_abs()


@dataclass(frozen=True)
class RegularizedDrift:
    """Polynomial plus mollifier; callable on arrays."""

    poly: DriftPolynomial
    moll: Mollifier

    @classmethod
    def from_config(cls, coeffs: Sequence[float], delta: float, nodes: int = 64) -> "RegularizedDrift":
        return cls(DriftPolynomial(tuple(coeffs)), Mollifier(delta, nodes))

    @property
    def delta(self) -> float:
        return self.moll.delta

    def with_delta(self, delta: float) -> "RegularizedDrift":
        return RegularizedDrift(self.poly, Mollifier(delta, self.moll.nodes))

    def __call__(self, r):
        return eval_P_delta(self.poly, self.moll, r)


def write_drift_samples(drift: RegularizedDrift, path: str | Path, n: int = 401) -> None:
    """CSV of ``r, P(r), P_delta(r)`` for plotting."""
    d = drift.delta
    r = np.linspace(-0.25 - d, 1.25 + d, n)
    p = eval_P(drift.poly, r)
    pd = drift(r)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "P", "P_delta"])
        for row in zip(r, p, pd):
            w.writerow([f"{v:.12e}" for v in row])
