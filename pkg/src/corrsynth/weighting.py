"""Weighting functions ``K_w`` that define the measured functional.

A weighting turns the characteristic into a number,
``theta = integral I(E) K_w(E) dE``, and is designed so that the background
integrates to zero.  Three representations are supported:

* :class:`DiscreteWeighting` -- a comb of weighted delta functions,
* :class:`ContinuousWeighting` -- a bounded profile plus explicit deltas,
* :class:`Weighting2D` -- weights on a grid of scan positions.

Delta components are always kept as ``(location, mass)`` pairs.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate
from scipy.signal.windows import chebwin

from .errors import DesignError


# ---------------------------------------------------------------------------
# profiles for continuous weightings

@dataclass(frozen=True)
class ConstantProfile:
    value: float = 1.0

    def __call__(self, E):
        return np.full_like(np.asarray(E, dtype=float), self.value)

    def to_dict(self):
        return {"type": "constant", "value": self.value}


@dataclass(frozen=True)
class PolynomialProfile:
    """Polynomial in ``E - origin`` with ascending coefficients."""

    coeffs: tuple
    origin: float = 0.0

    def __call__(self, E):
        x = np.asarray(E, dtype=float) - self.origin
        return np.polynomial.polynomial.polyval(x, np.asarray(self.coeffs, dtype=float))

    def to_dict(self):
        return {"type": "polynomial", "coeffs": list(self.coeffs), "origin": self.origin}


@dataclass(frozen=True)
class TableProfile:
    """Piecewise-linear profile through ``(E, K)`` points."""

    E: tuple
    K: tuple

    def __post_init__(self):
        if len(self.E) != len(self.K) or len(self.E) < 2:
            raise ValueError("profile table needs >= 2 matching (E, K) points")
        if np.any(np.diff(self.E) <= 0):
            raise ValueError("profile table E must be strictly increasing")

    def __call__(self, E):
        return np.interp(np.asarray(E, dtype=float), self.E, self.K)

    def to_dict(self):
        return {"type": "table", "E": list(self.E), "K": list(self.K)}


def _profile_from_dict(d):
    kind = d["type"]
    if kind == "constant":
        return ConstantProfile(d["value"])
    if kind == "polynomial":
        return PolynomialProfile(tuple(d["coeffs"]), d.get("origin", 0.0))
    if kind == "table":
        return TableProfile(tuple(d["E"]), tuple(d["K"]))
    raise ValueError(f"unknown profile type {kind!r}")


# ---------------------------------------------------------------------------
# weighting types

@dataclass(frozen=True, eq=False)
class DiscreteWeighting:
    """``K_w(E) = sum_i W_i delta(E - E_i)`` referred to the level ``center``."""

    nodes: np.ndarray
    weights: np.ndarray
    center: float = 0.0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if nodes.size != weights.size or nodes.size < 1:
            raise DesignError("nodes and weights must be nonempty and of equal length")
        if nodes.size > 1 and np.any(np.diff(nodes) <= 0):
            raise DesignError("weighting nodes must be strictly increasing")
        if not np.all(np.isfinite(weights)) or np.sum(np.abs(weights)) <= 0:
            raise DesignError("weights must be finite and not all zero")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "center", float(self.center))

    @property
    def gamma_total(self) -> float:
        return float(np.sum(np.abs(self.weights)))

    @property
    def offsets(self) -> np.ndarray:
        """Node positions relative to the center, i.e. the modulation levels."""
        return self.nodes - self.center

    @property
    def span(self) -> float:
        return 2.0 * float(np.max(np.abs(self.offsets))) if self.nodes.size else 0.0

    def shifted(self, delta: float) -> "DiscreteWeighting":
        return DiscreteWeighting(self.nodes + delta, self.weights.copy(), self.center + delta)

    def recentered(self, center: float) -> "DiscreteWeighting":
        return self.shifted(center - self.center)

    def scaled(self, a: float) -> "DiscreteWeighting":
        return DiscreteWeighting(self.nodes.copy(), a * self.weights, self.center)

    def to_dict(self):
        return {"kind": "discrete",
                "nodes": [[float(e), float(w)] for e, w in zip(self.nodes, self.weights)],
                "deltas": [], "center": self.center}


@dataclass(frozen=True, eq=False)
class ContinuousWeighting:
    """Bounded profile on ``support`` plus explicit delta components.

    ``profile`` is zero outside ``support``.  ``deltas`` is a sequence of
    ``(location, mass)`` pairs.
    """

    profile: Callable
    support: tuple[float, float]
    deltas: tuple = ()
    center: Optional[float] = None

    def __post_init__(self):
        lo, hi = map(float, self.support)
        if not hi > lo:
            raise DesignError("weighting support must have positive width")
        object.__setattr__(self, "support", (lo, hi))
        object.__setattr__(self, "deltas",
                           tuple((float(x), float(m)) for x, m in self.deltas))
        if self.center is None:
            object.__setattr__(self, "center", 0.5 * (lo + hi))
        for x, _ in self.deltas:
            if not lo <= x <= hi:
                raise DesignError(f"delta at {x} lies outside support {self.support}")

    def __call__(self, E):
        """Profile value (deltas excluded)."""
        E = np.asarray(E, dtype=float)
        lo, hi = self.support
        inside = (E >= lo) & (E <= hi)
        return np.where(inside, self.profile(np.clip(E, lo, hi)), 0.0)

    @property
    def span(self) -> float:
        lo, hi = self.support
        return 2.0 * max(hi - self.center, self.center - lo)

    @property
    def profile_mass(self) -> float:
        return _abs_integral(self, *self.support)

    @property
    def gamma_total(self) -> float:
        return self.profile_mass + sum(abs(m) for _, m in self.deltas)

    def sign_changes(self, resolution: int = 4097) -> np.ndarray:
        """Approximate interior zero crossings of the profile, refined by bisection."""
        lo, hi = self.support
        E = np.linspace(lo, hi, resolution)
        s = np.sign(self(E))
        idx = []
        last = None
        for k, v in enumerate(s):
            if v == 0:
                continue
            if last is not None and v != s[last]:
                idx.append((last, k))
            last = k
        roots = []
        for a, b in idx:
            ea, eb = E[a], E[b]
            sa = s[a]
            for _ in range(100):
                mid = 0.5 * (ea + eb)
                v = np.sign(self(mid))
                if v == sa:
                    ea = mid
                elif v == 0:
                    ea = eb = mid
                    break
                else:
                    eb = mid
            roots.append(0.5 * (ea + eb))
        return np.asarray(roots)

    def shifted(self, delta: float) -> "ContinuousWeighting":
        prof = self.profile
        lo, hi = self.support
        return ContinuousWeighting(lambda E: prof(np.asarray(E) - delta), (lo + delta, hi + delta),
                                   tuple((x + delta, m) for x, m in self.deltas),
                                   self.center + delta)

    def recentered(self, center: float) -> "ContinuousWeighting":
        return self.shifted(center - self.center)

    def to_dict(self):
        if not hasattr(self.profile, "to_dict"):
            raise TypeError("profile is an arbitrary callable and cannot be serialized")
        return {"kind": "continuous", "profile": self.profile.to_dict(),
                "support": list(self.support),
                "deltas": [[x, m] for x, m in self.deltas], "center": self.center}


@dataclass(frozen=True, eq=False)
class Weighting2D:
    """Weights ``W[i, j] = K_w(x_i, y_j)`` on a rectangular grid."""

    xs: np.ndarray
    ys: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float).ravel()
        ys = np.asarray(self.ys, dtype=float).ravel()
        W = np.asarray(self.weights, dtype=float)
        if W.shape != (xs.size, ys.size) or W.size == 0:
            raise DesignError(f"weights shape {W.shape} does not match grid {(xs.size, ys.size)}")
        if np.sum(np.abs(W)) <= 0:
            raise DesignError("2-D weighting is identically zero")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "weights", W)

    @property
    def gamma_total(self) -> float:
        return float(np.sum(np.abs(self.weights)))

    def to_dict(self):
        return {"kind": "grid2d", "xs": self.xs.tolist(), "ys": self.ys.tolist(),
                "nodes": self.weights.tolist(), "deltas": [], "center": None}


Weighting = Union[DiscreteWeighting, ContinuousWeighting, Weighting2D]


# ---------------------------------------------------------------------------
# serialization

def to_json(w: Weighting) -> str:
    return json.dumps(w.to_dict())


def from_dict(d: dict) -> Weighting:
    kind = d["kind"]
    if kind == "discrete":
        pairs = np.asarray(d["nodes"], dtype=float).reshape(-1, 2)
        return DiscreteWeighting(pairs[:, 0], pairs[:, 1], d.get("center", 0.0))
    if kind == "continuous":
        return ContinuousWeighting(_profile_from_dict(d["profile"]), tuple(d["support"]),
                                   tuple(tuple(p) for p in d.get("deltas", [])), d.get("center"))
    if kind == "grid2d":
        return Weighting2D(d["xs"], d["ys"], d["nodes"])
    raise ValueError(f"unknown weighting kind {kind!r}")


def from_json(text: str) -> Weighting:
    return from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# constructors

def boxcar_with_end_deltas(E_l: float, E_h: float) -> ContinuousWeighting:
    """Unit plateau on ``[E_l, E_h]`` with negative deltas at both ends.

    Each end carries mass ``0.5 * (E_l - E_h)``, which cancels the plateau
    against any affine background.  The result measures the area of the
    curve above the straight line joining its end values.
    """
    if not E_l < E_h:
        raise ValueError(f"boxcar bounds inverted: E_l={E_l} >= E_h={E_h}")
    m = 0.5 * (E_l - E_h)
    return ContinuousWeighting(ConstantProfile(1.0), (E_l, E_h), ((E_l, m), (E_h, m)))


def delta_minus_comb(E_c: float, comb_nodes: Sequence[float],
                     coefficients: Sequence[float]) -> DiscreteWeighting:
    """``delta(E - E_c) - sum_i a_i delta(E - E_i)``."""
    comb = np.asarray(comb_nodes, dtype=float)
    a = np.asarray(coefficients, dtype=float)
    if comb.size != a.size:
        raise ValueError("comb nodes and coefficients differ in length")
    if np.unique(comb).size != comb.size:
        raise ValueError("comb nodes must be distinct")
    if np.any(comb == E_c):
        raise ValueError("comb nodes must not coincide with the center E_c")
    nodes = np.concatenate([[E_c], comb])
    weights = np.concatenate([[1.0], -a])
    order = np.argsort(nodes)
    return DiscreteWeighting(nodes[order], weights[order], E_c)


def moment_design(nodes: Sequence[float], kill_moments: int, center: Optional[float] = None,
                  normalization: float = 1.0) -> DiscreteWeighting:
    """Minimum-norm weights annihilating polynomials up to degree ``kill_moments``.

    Solves ``sum W_i x_i^k = 0`` for ``k = 0..d`` and
    ``sum W_i x_i^(d+1) = normalization`` with ``x = E - center``, choosing
    the solution of least ``sum W_i^2``.
    """
    E = np.sort(np.asarray(nodes, dtype=float))
    d = int(kill_moments)
    if d < 0:
        raise ValueError("kill_moments must be >= 0")
    if E.size < d + 2:
        raise DesignError(
            f"{E.size} nodes cannot satisfy {d + 1} annihilation constraints plus normalization"
            f" (need >= {d + 2})")
    if np.unique(E).size != E.size:
        raise DesignError("moment design nodes must be distinct")
    c = float(np.mean(E)) if center is None else float(center)
    x = E - c
    scale = float(np.max(np.abs(x))) or 1.0
    xs = x / scale
    A = np.vander(xs, d + 2, increasing=True).T
    for k in range(1, d + 2):
        if np.linalg.matrix_rank(A[: k + 1]) < k + 1:
            raise DesignError(f"constraint system singular: moment {k} is linearly dependent")
    b = np.zeros(d + 2)
    # scaled coordinates: sum W xs^(d+1) = normalization / scale^(d+1)
    b[-1] = normalization / scale ** (d + 1)
    W = A.T @ np.linalg.solve(A @ A.T, b)
    return DiscreteWeighting(E, W, c)


def dolph_chebyshev_coefficients(n: int, attenuation_db: float = 60.0) -> np.ndarray:
    """Dolph-Chebyshev taper of length ``n`` normalized to unit sum."""
    if n < 2:
        raise ValueError("need at least two Chebyshev coefficients")
    w = chebwin(n, at=attenuation_db, sym=True)
    return w / w.sum()


def chebyshev_comb(E_c: float, spacing: float, n_comb: int = 4,
                   attenuation_db: float = 60.0) -> DiscreteWeighting:
    """Peak-over-background weighting with a Dolph-Chebyshev background comb.

    The ``n_comb`` comb nodes sit symmetrically around ``E_c`` (the center
    itself is skipped), so symmetric unit-sum coefficients reject constant and
    linear backgrounds.
    """
    if n_comb < 2 or n_comb % 2:
        raise ValueError("n_comb must be a positive even number")
    half = n_comb // 2
    k = np.concatenate([np.arange(-half, 0), np.arange(1, half + 1)])
    a = dolph_chebyshev_coefficients(n_comb, attenuation_db)
    return delta_minus_comb(E_c, E_c + spacing * k, a)


def derivative_stencil(E_c: float, h: float) -> DiscreteWeighting:
    """Central difference ``(I(E_c + h) - I(E_c - h)) / 2h``."""
    return DiscreteWeighting([E_c - h, E_c + h], [-0.5 / h, 0.5 / h], E_c)


def richardson_derivative(E_c: float, h: float, ratio: float = 2.5) -> DiscreteWeighting:
    """Four-node derivative whose cubic error term cancels.

    Combines central differences at ``h`` and ``ratio * h``.
    """
    r2 = ratio * ratio
    inner = r2 / (r2 - 1) * 0.5 / h
    outer = -1.0 / (r2 - 1) * 0.5 / (ratio * h)
    nodes = E_c + np.array([-ratio * h, -h, h, ratio * h])
    return DiscreteWeighting(nodes, [-outer, -inner, inner, outer], E_c)


# ---------------------------------------------------------------------------
# evaluation

def _abs_integral(w: ContinuousWeighting, a: float, b: float) -> float:
    f = lambda E: abs(float(w(E)))
    val, _ = integrate.quad(f, a, b, epsabs=1e-14, epsrel=1e-13, limit=400,
                            points=_breakpoints(w, a, b))
    return val


def _breakpoints(w: ContinuousWeighting, a: float, b: float):
    pts = [x for x, _ in w.deltas if a < x < b]
    prof = w.profile
    if isinstance(prof, TableProfile):
        pts += [x for x in prof.E if a < x < b]
    return sorted(set(pts)) or None


def background_residual(w: Weighting, background: Callable) -> float:
    """``integral I_b(E) K_w(E) dE`` over the weighting support.

    Deltas and nodes are evaluated directly; a continuous profile is
    integrated by adaptive quadrature.  Nothing is rounded to zero.
    For :class:`Weighting2D` the background takes ``(x, y)``.
    """
    if isinstance(w, DiscreteWeighting):
        return float(np.sum(w.weights * np.asarray(background(w.nodes), dtype=float)))
    if isinstance(w, Weighting2D):
        X, Y = np.meshgrid(w.xs, w.ys, indexing="ij")
        return float(np.sum(w.weights * background(X, Y)))
    lo, hi = w.support
    f = lambda E: float(w(E) * background(np.asarray(E, dtype=float)))
    with warnings.catch_warnings():
        # tolerances sit at round-off on purpose; quad flags that
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        plateau, _ = integrate.quad(f, lo, hi, epsabs=1e-15, epsrel=1e-14, limit=400,
                                    points=_breakpoints(w, lo, hi))
    lumps = math.fsum(m * float(background(np.asarray(x))) for x, m in w.deltas)
    return plateau + lumps


def apply_weighting(w: Weighting, curve: Callable) -> float:
    """Weighted integral of an arbitrary curve, the ideal noiseless estimate."""
    return background_residual(w, curve)
