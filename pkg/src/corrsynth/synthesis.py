"""Co-synthesis of the modulating stimulus and the correlation reference.

Every schedule is stored as a sequence of *slots*: a slot holds the stimulus
at ``levels[k]`` (relative to ``center``) for a fraction ``fractions[k]`` of
the modulation period, optionally ramping with ``slopes[k]``.  Stepwise
schedules use one slot per level; continuous sweeps use many short slots whose
levels are the Gamma-midpoints of equal-time cells.  The reference carries one
value per slot plus a calibration factor (``gain * period``) that puts the
correlation output in the units of the weighted integral it estimates.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import integrate

from .errors import CoverageError, DesignError, PackingError, ResolutionError
from .weighting import ContinuousWeighting, DiscreteWeighting, Weighting2D

_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


# ---------------------------------------------------------------------------
# value types

def _closed_dwells(fractions, period) -> np.ndarray:
    """``fractions * period`` with the longest slot absorbing the rounding,
    so the dwells add up to the period."""
    dw = np.asarray(fractions, dtype=float) * period
    k = int(np.argmax(dw))
    dw[k] = period - math.fsum(np.delete(dw, k))
    dw.setflags(write=False)
    return dw


@dataclass(frozen=True, eq=False)
class StimulusSchedule:
    """One period of the modulating signal ``E_M(t)`` as a list of slots."""

    period: float
    kind: str
    levels: np.ndarray
    fractions: np.ndarray
    slopes: Optional[np.ndarray] = None
    holds: Optional[np.ndarray] = None
    segment_ids: Optional[np.ndarray] = None
    center: float = 0.0
    span: Optional[float] = None

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("period must be positive")
        if self.kind not in ("stepwise", "continuous", "harmonic", "dynamic"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        levels = np.asarray(self.levels, dtype=float).ravel()
        frac = np.asarray(self.fractions, dtype=float).ravel()
        n = levels.size
        if frac.size != n or n == 0:
            raise ValueError("levels and fractions must be nonempty and equal length")
        if np.any(frac <= 0):
            raise ValueError("every slot needs a positive dwell")
        if abs(math.fsum(frac) - 1.0) > 1e-9:
            raise ValueError(f"slot fractions sum to {math.fsum(frac)!r}, not 1")
        slopes = np.zeros(n) if self.slopes is None else np.asarray(self.slopes, dtype=float).ravel()
        holds = (np.full(n, self.kind == "stepwise") if self.holds is None
                 else np.asarray(self.holds, dtype=bool).ravel())
        seg = np.arange(n) if self.segment_ids is None else np.asarray(self.segment_ids, dtype=int).ravel()
        span = self.span
        if span is None:
            ends = np.abs(np.concatenate([levels - 0.5 * slopes * frac * self.period,
                                          levels + 0.5 * slopes * frac * self.period]))
            span = 2.0 * float(np.max(ends))
        lim = 0.5 * span * (1 + 1e-12) + 1e-300
        if np.any(np.abs(levels) > lim):
            raise ValueError("schedule levels exceed the modulation range E_m/2")
        for name, val in (("levels", levels), ("fractions", frac), ("slopes", slopes),
                          ("holds", holds), ("segment_ids", seg)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "span", float(span))
        object.__setattr__(self, "period", float(self.period))
        object.__setattr__(self, "_dwells", _closed_dwells(frac, self.period))
        object.__setattr__(self, "center", float(self.center))

    @classmethod
    def from_dwells(cls, levels, dwells, kind="stepwise", **kw):
        d = np.asarray(dwells, dtype=float)
        T = math.fsum(d)
        return cls(period=T, kind=kind, levels=levels, fractions=d / T, **kw)

    @property
    def n_slots(self) -> int:
        return self.levels.size

    @property
    def dwells(self) -> np.ndarray:
        return self._dwells

    @property
    def starts(self) -> np.ndarray:
        """Slot start times within ``[0, period)``."""
        return np.concatenate([[0.0], np.cumsum(self.dwells)[:-1]])

    @property
    def absolute_levels(self) -> np.ndarray:
        return self.center + self.levels

    def recentered(self, center: float) -> "StimulusSchedule":
        return StimulusSchedule(self.period, self.kind, self.levels, self.fractions, self.slopes,
                                self.holds, self.segment_ids, center, self.span)

    def with_period(self, period: float) -> "StimulusSchedule":
        return StimulusSchedule(period, self.kind, self.levels, self.fractions,
                                self.slopes * self.period / period, self.holds,
                                self.segment_ids, self.center, self.span)

    def reordered(self, order) -> "StimulusSchedule":
        order = np.asarray(order)
        return StimulusSchedule(self.period, self.kind, self.levels[order], self.fractions[order],
                                self.slopes[order], self.holds[order], self.segment_ids[order],
                                self.center, self.span)

    def waveform(self, t) -> np.ndarray:
        """Relative stimulus ``E_M(t)`` at times ``t`` (taken modulo the period)."""
        t = np.mod(np.asarray(t, dtype=float), self.period)
        starts = self.starts
        k = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, self.n_slots - 1)
        mid = starts[k] + 0.5 * self.dwells[k]
        return self.levels[k] + self.slopes[k] * (t - mid)


@dataclass(frozen=True, eq=False)
class ReferenceWaveform:
    """Correlation reference, one value per stimulus slot.

    ``calibration`` equals ``gain * period``; the meter multiplies the raw
    correlation by ``calibration / period``.
    """

    kind: str
    values: np.ndarray
    calibration: float = 1.0
    u0: Optional[float] = None
    omega0: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("bilevel", "stepwise_general", "harmonic"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        v = np.asarray(self.values, dtype=float).ravel()
        if self.kind == "bilevel" and not np.all(np.isin(v, (-1.0, 1.0))):
            raise ValueError("bilevel reference values must be +-1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "calibration", float(self.calibration))

    def gain(self, period: float) -> float:
        return self.calibration / period

    def with_values(self, values, kind=None) -> "ReferenceWaveform":
        return ReferenceWaveform(kind or self.kind, values, self.calibration, self.u0, self.omega0)

    def with_calibration(self, calibration: float) -> "ReferenceWaveform":
        return ReferenceWaveform(self.kind, self.values, calibration, self.u0, self.omega0)


@dataclass(frozen=True, eq=False)
class DualChannelSchedule:
    """Shared stepwise stimulus with value and derivative references."""

    schedule: StimulusSchedule
    reference_c: ReferenceWaveform
    reference_d: ReferenceWaveform
    balance: tuple[float, float]

    def __post_init__(self):
        mc, md = self.balance
        if mc < 0 or md < 0 or abs(mc + md - 1) > 1e-12:
            raise ValueError("balance needs mu_c, mu_d >= 0 with mu_c + mu_d = 1")


@dataclass(frozen=True, eq=False)
class ScanSchedule2D:
    """Raster of dwell points ``(x, y)`` with a bilevel reference."""

    period: float
    xs: np.ndarray
    ys: np.ndarray
    fractions: np.ndarray
    reference: ReferenceWaveform

    @property
    def dwells(self) -> np.ndarray:
        return _closed_dwells(self.fractions, self.period)


@dataclass
class SynthesisReport:
    max_norm: float
    l2_norm: float
    passed: bool
    tolerance: float
    n_points: int
    relative_to: float = 1.0
    notes: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Gamma accumulator

class GammaAccumulator:
    """Cumulative absolute weight ``Gamma(E) = int_lo^E |K(x)| dx`` of a profile.

    Deltas are not included; callers account for them as dwell lumps.  The
    profile is tabulated on a fine grid refined at sign changes and table
    knots, and ``Gamma`` between grid points is evaluated by Gauss-Legendre.
    """

    def __init__(self, w: ContinuousWeighting, cells: int = 2048):
        lo, hi = w.support
        brk = [lo, hi] + [x for x, _ in w.deltas] + list(w.sign_changes())
        if hasattr(w.profile, "E"):
            brk += list(w.profile.E)
        brk = np.unique(np.clip(np.asarray(brk, dtype=float), lo, hi))
        grid = np.unique(np.concatenate([np.linspace(lo, hi, cells + 1), brk]))
        self.w = w
        self.grid = grid
        cell = self._cell_integral(grid[:-1], grid[1:])
        self.cum = np.concatenate([[0.0], np.cumsum(cell)])
        self.total = float(self.cum[-1])

    def _abs_profile(self, E):
        return np.abs(self.w(E))

    def _cell_integral(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        half = 0.5 * (b - a)
        mid = 0.5 * (b + a)
        x = mid[..., None] + half[..., None] * _GL_X
        return half * np.sum(_GL_W * self._abs_profile(x), axis=-1)

    def __call__(self, E):
        E = np.clip(np.asarray(E, dtype=float), self.grid[0], self.grid[-1])
        k = np.clip(np.searchsorted(self.grid, E, side="right") - 1, 0, self.grid.size - 2)
        return self.cum[k] + self._cell_integral(self.grid[k], E)

    def inverse(self, g):
        """Left-continuous inverse: smallest ``E`` with ``Gamma(E) >= g``."""
        g = np.asarray(g, dtype=float)
        k = np.clip(np.searchsorted(self.cum, g, side="left") - 1, 0, self.grid.size - 2)
        return _solve_increasing(self, self._abs_profile, g, self.grid[k], self.grid[k + 1])


def _solve_increasing(f, slope, target, lo, hi, max_iter=200):
    """Smallest root of nondecreasing ``f(x) = target`` inside brackets ``[lo, hi]``.

    Newton steps while they stay inside the bracket, bisection otherwise
    (including flat stretches, which converge to their left end).
    """
    target = np.asarray(target, dtype=float)
    lo = np.array(np.broadcast_to(lo, target.shape), dtype=float).ravel()
    hi = np.array(np.broadcast_to(hi, target.shape), dtype=float).ravel()
    tgt = target.ravel()
    x = 0.5 * (lo + hi)
    active = np.arange(x.size)
    for _ in range(max_iter):
        if active.size == 0:
            break
        xa, la, ha = x[active], lo[active], hi[active]
        r = f(xa) - tgt[active]
        above = r >= 0
        ha = np.where(above, xa, ha)
        la = np.where(above, la, xa)
        d = slope(xa)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = xa - r / d
        newton = np.isfinite(step) & (step >= la) & (step <= ha) & (d > 0)
        nxt = np.where(newton, step, 0.5 * (la + ha))
        tol = 2 * np.spacing(np.maximum(np.abs(la), np.abs(ha)))
        collapsed = ha - la <= tol
        x[active] = np.where(collapsed, ha, nxt)
        lo[active], hi[active] = la, ha
        active = active[~(collapsed | (np.abs(nxt - xa) <= tol))]
    return x.reshape(target.shape)


# ---------------------------------------------------------------------------
# synthesis

def _order_indices(levels, order, seed):
    if order == "ascending":
        return np.argsort(levels, kind="stable")
    if order == "descending":
        return np.argsort(levels, kind="stable")[::-1]
    if order == "randomized":
        return np.random.default_rng(seed).permutation(levels.size)
    raise ValueError(f"unknown segment order {order!r}")


def synthesize_discrete(w: DiscreteWeighting, T: float, order: str = "ascending",
                        seed: Optional[int] = None):
    """Stepwise stimulus with dwell ``T |W_i| / sum |W|`` and bilevel reference.

    Zero-weight nodes get no slot.  Returns ``(schedule, reference)``.
    """
    if not T > 0:
        raise ValueError("period T must be positive")
    W = w.weights
    keep = W != 0
    if not np.any(keep):
        raise DesignError("all weights are zero")
    gamma = w.gamma_total
    levels = w.offsets[keep]
    frac = np.abs(W[keep]) / gamma
    ref = np.sign(W[keep])
    idx = _order_indices(levels, order, seed)
    sched = StimulusSchedule(T, "stepwise", levels[idx], frac[idx], center=w.center,
                             span=max(w.span, 2 * float(np.max(np.abs(levels)))))
    return sched, ReferenceWaveform("bilevel", ref[idx], calibration=gamma)


def _right_sign(w: ContinuousWeighting, E, eps):
    s = np.sign(w(E))
    zero = s == 0
    if np.any(zero):
        s[zero] = np.sign(w(np.asarray(E)[zero] + eps))
    zero = s == 0
    if np.any(zero):
        s[zero] = np.sign(w(np.asarray(E)[zero] - eps))
    s[s == 0] = 1.0
    return s


def _cell_slopes(levels, dwells, holds, seg):
    """Ramp slope of each sweep cell from the spacing of its neighbours.

    A cell spans half the distance to the previous and next cell of the
    same sweep, so the stimulus moves continuously through it.
    """
    slopes = np.zeros(levels.size)
    for sid in np.unique(seg[~holds]):
        idx = np.flatnonzero((seg == sid) & ~holds)
        if idx.size < 2:
            continue
        e = levels[idx]
        width = np.empty(idx.size)
        width[1:-1] = 0.5 * (e[2:] - e[:-2])
        width[0] = e[1] - e[0]
        width[-1] = e[-1] - e[-2]
        slopes[idx] = width / dwells[idx]
    return slopes


def _blend_edges(acc: GammaAccumulator, a, b, ga, mass, cells):
    """Edges uniform in ``(Gamma - Gamma(a)) / mass + (E - a) / (b - a)`` on ``[a, b]``."""
    blend = lambda E: (acc(E) - ga) / mass + (E - a) / (b - a)
    slope = lambda E: acc._abs_profile(E) / mass + 1.0 / (b - a)
    target = 2.0 * np.arange(cells + 1) / cells
    # bracket each target on the accumulator grid
    knots = np.unique(np.concatenate([[a, b], acc.grid[(acc.grid > a) & (acc.grid < b)]]))
    at_knots = (np.interp(knots, acc.grid, acc.cum) - ga) / mass + (knots - a) / (b - a)
    k = np.clip(np.searchsorted(at_knots, target, side="left") - 1, 0, knots.size - 2)
    edges = _solve_increasing(blend, slope, target, knots[k], knots[k + 1])
    edges[0], edges[-1] = a, b
    return edges


def synthesize_continuous(w: ContinuousWeighting, T: float, samples: int = 4096):
    """Continuous optimal sweep by inversion of the cumulative weight.

    Time is shared between profile pieces and delta lumps in proportion to
    their absolute weight.  Inside a piece the stimulus moves so that the
    cumulative weight grows linearly with time; on stretches where the profile
    vanishes it jumps.  Each delta is an exact hold.  Returns
    ``(schedule, reference)`` with a bilevel reference ``sign(K_w)``.
    """
    if not T > 0:
        raise ValueError("period T must be positive")
    if samples < 64:
        raise ValueError("samples must be >= 64")
    acc = GammaAccumulator(w)
    total = acc.total + sum(abs(m) for _, m in w.deltas)
    if total <= 0:
        raise DesignError("weighting profile is identically zero")
    lo, hi = w.support
    cuts = sorted({lo, hi, *[x for x, _ in w.deltas], *w.sign_changes()})
    deltas = {}
    for x, m in w.deltas:
        deltas[x] = deltas.get(x, 0.0) + m
    eps = 1e-9 * (hi - lo)

    levels, frac, ref, holds, seg = [], [], [], [], []
    seg_id = 0

    def hold(x):
        nonlocal seg_id
        m = deltas.get(x, 0.0)
        if m != 0.0:
            levels.append(np.array([x]))
            frac.append(np.array([abs(m) / total]))
            ref.append(np.array([np.sign(m)]))
            holds.append(np.array([True]))
            seg.append(np.array([seg_id]))
            seg_id += 1

    hold(cuts[0])
    for a, b in zip(cuts[:-1], cuts[1:]):
        ga, gb = float(acc(a)), float(acc(b))
        mass = gb - ga
        if mass > 0:
            n = max(1, int(round(samples * mass / acc.total)))
            # cell edges uniform in a blend of weight and stimulus, so cells
            # stay narrow where the profile is small and vary smoothly
            edges = _blend_edges(acc, a, b, ga, mass, 2 * n)
            g_edges = acc(edges)
            g_edges[0], g_edges[-1] = ga, gb
            cell_mass = np.diff(g_edges)
            live = cell_mass > 1e-14 * mass
            g = (0.5 * (g_edges[:-1] + g_edges[1:]))[live]
            cell_mass = cell_mass[live]
            n = g.size
            E = np.clip(acc.inverse(g), a, b)
            levels.append(E)
            frac.append(cell_mass / total)
            ref.append(_right_sign(w, E, eps))
            holds.append(np.zeros(n, dtype=bool))
            seg.append(np.full(n, seg_id))
            seg_id += 1
        hold(b)

    levels = np.concatenate(levels) - w.center
    frac = np.concatenate(frac)
    holds = np.concatenate(holds)
    seg = np.concatenate(seg)
    slopes = _cell_slopes(levels, frac * T, holds, seg)
    sched = StimulusSchedule(T, "continuous", levels, frac, slopes, holds, seg, center=w.center,
                             span=w.span)
    return sched, ReferenceWaveform("bilevel", np.concatenate(ref), calibration=total)


def synthesize_dual(w_c: DiscreteWeighting, w_d: DiscreteWeighting, mu, T: float,
                    order: str = "ascending") -> DualChannelSchedule:
    """Shared stepwise stimulus for simultaneous value and derivative channels.

    Dwell times follow ``sqrt(mu_c W_c^2 + mu_d W_d^2)``; the references are
    ``W_c / tau`` and ``W_d / tau`` so each channel's output is its weighted
    sum directly (unit gain).
    """
    if w_c.nodes.shape != w_d.nodes.shape or not np.array_equal(w_c.nodes, w_d.nodes):
        raise ValueError("value and derivative weightings must share one node set")
    mc, md = map(float, mu)
    if mc < 0 or md < 0 or abs(mc + md - 1) > 1e-12:
        raise ValueError("balance needs mu_c, mu_d >= 0 with mu_c + mu_d = 1")
    if not T > 0:
        raise ValueError("period T must be positive")
    root = np.sqrt(mc * w_c.weights ** 2 + md * w_d.weights ** 2)
    keep = root > 0
    if not np.any(keep):
        raise DesignError("both channels are zero at every node")
    frac = root[keep] / math.fsum(root[keep])
    tau = frac * T
    levels = w_c.offsets[keep]
    idx = _order_indices(levels, order, None)
    sched = StimulusSchedule(T, "stepwise", levels[idx], frac[idx], center=w_c.center,
                             span=max(w_c.span, 2 * float(np.max(np.abs(levels)))))
    u_c = ReferenceWaveform("stepwise_general", (w_c.weights[keep] / tau)[idx], calibration=T)
    u_d = ReferenceWaveform("stepwise_general", (w_d.weights[keep] / tau)[idx], calibration=T)
    return DualChannelSchedule(sched, u_c, u_d, (mc, md))


def _sign_intervals(w: Union[DiscreteWeighting, ContinuousWeighting]):
    """Split a weighting into maximal constant-sign intervals.

    Returns a list of dicts with ``sign``, ``mass`` and a callable mapping a
    local progress fraction in [0, 1] to (level, delta-flag) pieces.
    """
    out = []
    if isinstance(w, DiscreteWeighting):
        W = w.weights
        keep = np.flatnonzero(W != 0)
        groups = []
        for i in keep:
            if groups and np.sign(W[groups[-1][-1]]) == np.sign(W[i]):
                groups[-1].append(i)
            else:
                groups.append([i])
        for g in groups:
            out.append(dict(sign=float(np.sign(W[g[0]])), nodes=w.nodes[g],
                            masses=np.abs(W[g]), mass=float(np.sum(np.abs(W[g])))))
        return out
    if w.deltas:
        raise DesignError("narrowband synthesis of continuous weightings with deltas is not supported")
    lo, hi = w.support
    cuts = [lo, *w.sign_changes(), hi]
    acc = GammaAccumulator(w)
    eps = 1e-9 * (hi - lo)
    for a, b in zip(cuts[:-1], cuts[1:]):
        ga, gb = float(acc(a)), float(acc(b))
        if gb - ga <= 0:
            continue
        s = float(_right_sign(w, np.array([0.5 * (a + b)]), eps)[0])
        out.append(dict(sign=s, a=a, b=b, ga=ga, mass=gb - ga, acc=acc))
    return out


def _halfperiod_progress(n: int):
    """Equal-time cell edges of one half-period and the |sin| progress there."""
    theta = np.linspace(0.0, np.pi, n + 1)
    return theta, 0.5 * (1.0 - np.cos(theta))


def synthesize_narrowband(w, omega0: float, u0: float = 1.0, half_periods: Optional[int] = None,
                          cells_per_half: int = 64, max_distortion: float = 0.01):
    """Harmonic-reference schedule for coloured-noise conditions.

    The weighting is split where it changes sign.  Interval ``l`` receives
    ``m_l`` half-periods of the reference, ``m_l`` being the rounded share
    ``half_periods * mass_l / Gamma``.  Within each half-period the reference is
    ``u0 |sin|`` with the interval's sign, and the stimulus advances through
    the interval so that the cumulative weight tracks the integral of the
    reference magnitude.  When the positive and negative half-period counts
    match, half-periods are interleaved and the reference is a pure sinusoid.

    Returns ``(schedule, reference, info)``; ``info`` holds the half-period
    allocation and the worst relative weight distortion caused by rounding.
    """
    if not omega0 > 0:
        raise ValueError("omega0 must be positive")
    intervals = _sign_intervals(w)
    if not intervals:
        raise DesignError("weighting is identically zero")
    gamma = sum(iv["mass"] for iv in intervals)
    share = np.array([iv["mass"] / gamma for iv in intervals])

    def allocate(H):
        return np.rint(H * share).astype(int)

    if half_periods is None:
        H = len(intervals)
        while True:
            m = allocate(H)
            if np.all(m > 0):
                dist = np.max(np.abs(m / m.sum() / share - 1))
                if dist <= max_distortion or H >= 4096:
                    break
            H += 1
    else:
        H = int(half_periods)
        m = allocate(H)
        if np.any(m <= 0):
            bad = int(np.flatnonzero(m <= 0)[0])
            raise ResolutionError(
                f"interval {bad} rounds to zero reference half-periods at {H} half-periods;"
                " increase the period (more half-periods) or omega0")
    distortion = float(np.max(np.abs(m / m.sum() / share - 1)))

    # half-period sequence: (interval index, j-th of m_l)
    pos = [(l, j) for l, iv in enumerate(intervals) if iv["sign"] > 0 for j in range(m[l])]
    neg = [(l, j) for l, iv in enumerate(intervals) if iv["sign"] < 0 for j in range(m[l])]
    if len(pos) == len(neg):
        seq = [x for pair in zip(pos, neg) for x in pair]
        interleaved = True
    else:
        seq = [(l, j) for l in range(len(intervals)) for j in range(m[l])]
        interleaved = False

    half = np.pi / omega0
    theta, prog = _halfperiod_progress(cells_per_half)
    levels, frac_t, refs = [], [], []
    for l, j in seq:
        iv = intervals[l]
        lo_p, hi_p = j / m[l], (j + 1) / m[l]
        if "nodes" in iv:
            # exact breakpoints where progress crosses node boundaries
            bounds = np.concatenate([[0.0], np.cumsum(iv["masses"])]) / iv["mass"]
            p_edges = np.unique(np.concatenate([prog, np.clip((bounds - lo_p) / (hi_p - lo_p), 0, 1)]))
            th = np.arccos(np.clip(1 - 2 * p_edges, -1, 1))
            p_mid = lo_p + (hi_p - lo_p) * 0.5 * (p_edges[:-1] + p_edges[1:])
            node = np.clip(np.searchsorted(bounds, p_mid, side="right") - 1, 0, len(iv["nodes"]) - 1)
            lev = iv["nodes"][node]
        else:
            th = theta
            p_mid_t = 0.5 * (1 - np.cos(0.5 * (th[:-1] + th[1:])))
            p_mid = lo_p + (hi_p - lo_p) * p_mid_t
            lev = iv["acc"].inverse(iv["ga"] + iv["mass"] * p_mid)
            lev = np.clip(lev, iv["a"], iv["b"])
        dth = np.diff(th)
        ok = dth > 0
        th0, dth, lev = th[:-1][ok], dth[ok], np.asarray(lev)[ok]
        # slot-averaged |sin| keeps the reference integral exact
        avg = (np.cos(th0) - np.cos(th0 + dth)) / dth
        levels.append(lev)
        frac_t.append(dth / omega0)
        refs.append(iv["sign"] * u0 * avg)
    dw = np.concatenate(frac_t)
    T = float(len(seq) * half)
    u = np.concatenate(refs)
    abs_int = math.fsum(np.abs(u) * dw)
    sched = StimulusSchedule(T, "continuous", np.concatenate(levels) - w.center, dw / math.fsum(dw),
                             center=w.center, span=w.span)
    reference = ReferenceWaveform("harmonic", u, calibration=gamma * T / abs_int, u0=u0, omega0=omega0)
    info = dict(half_periods=m.tolist(), signs=[iv["sign"] for iv in intervals],
                distortion=distortion, interleaved=interleaved, period=T)
    return sched, reference, info


def synthesize_2d(w: Weighting2D, T: float, order: str = "boustrophedon") -> ScanSchedule2D:
    """Raster dwell schedule with ``tau_ij = T |W_ij| / sum |W|``."""
    if not T > 0:
        raise ValueError("period T must be positive")
    W = w.weights
    if not np.any(W != 0):
        raise DesignError("2-D weighting is identically zero")
    gamma = w.gamma_total
    xs, ys, fr, ref = [], [], [], []
    for i in range(w.xs.size):
        js = range(w.ys.size)
        if order == "boustrophedon" and i % 2:
            js = reversed(range(w.ys.size))
        elif order not in ("boustrophedon", "raster"):
            raise ValueError(f"unknown visiting order {order!r}")
        for j in js:
            if W[i, j] != 0:
                xs.append(w.xs[i])
                ys.append(w.ys[j])
                fr.append(abs(W[i, j]) / gamma)
                ref.append(np.sign(W[i, j]))
    return ScanSchedule2D(float(T), np.array(xs), np.array(ys), np.array(fr),
                          ReferenceWaveform("bilevel", ref, calibration=gamma))


def packing_sums(w: Weighting2D) -> tuple[float, float]:
    """Ascending and descending sums ``sum |E'| |W|`` over positive/negative speeds."""
    speeds = w.ys[None, :]
    mass = np.abs(speeds) * np.abs(w.weights)
    up = math.fsum(mass[:, w.ys > 0].ravel())
    down = math.fsum(mass[:, w.ys < 0].ravel())
    return up, down


def synthesize_dynamic(w: Weighting2D, T: float, rtol: float = 1e-9):
    """Closed constant-slope trajectory for a rate-dependent device.

    ``w.xs`` are stimulus levels ``E_i`` and ``w.ys`` are sweep speeds
    ``E'_j``.  Each nonzero node becomes a ramp of slope ``E'_j`` lasting
    ``T |W_ij| / Gamma``.  Rising ramps run first in ascending ``E``, falling
    ramps follow in descending ``E``; the path closes exactly when rising and
    falling mass balance.  Returns ``(schedule, reference)``.
    """
    if np.any(w.ys == 0):
        raise DesignError("dynamic weighting speeds must be nonzero")
    up, down = packing_sums(w)
    if abs(up - down) > rtol * max(up, down):
        raise PackingError(up, down)
    gamma = w.gamma_total
    rise, fall = [], []
    for i in range(w.xs.size):
        for j in range(w.ys.size):
            if w.weights[i, j] != 0:
                item = (w.xs[i], w.ys[j], abs(w.weights[i, j]) / gamma, np.sign(w.weights[i, j]))
                (rise if w.ys[j] > 0 else fall).append(item)
    rise.sort(key=lambda r: (r[0], r[1]))
    fall.sort(key=lambda r: (-r[0], r[1]))
    segs = rise + fall
    slopes = np.array([s[1] for s in segs])
    frac = np.array([s[2] for s in segs])
    delta_E = slopes * frac * T
    ends = np.concatenate([[0.0], np.cumsum(delta_E)])
    e_lo, e_hi = float(np.min(w.xs)), float(np.max(w.xs))
    center = 0.5 * (e_lo + e_hi)
    offset = -0.5 * (np.max(ends) + np.min(ends))
    start = ends[:-1] + offset
    mids = start + 0.5 * delta_E
    span = 2 * float(np.max(np.abs(ends + offset)))
    sched = StimulusSchedule(T, "dynamic", mids, frac, slopes=slopes, holds=np.zeros(len(segs), bool),
                             center=center, span=span)
    ref = ReferenceWaveform("bilevel", [s[3] for s in segs], calibration=gamma)
    return sched, ref


def rotated(s: StimulusSchedule, u: ReferenceWaveform, t0: float):
    """Same periodic signals observed from time ``t0`` on (slot split at ``t0``)."""
    t0 = float(np.mod(t0, s.period))
    starts = s.starts
    k = int(np.clip(np.searchsorted(starts, t0, side="right") - 1, 0, s.n_slots - 1))
    a = t0 - starts[k]
    b = s.dwells[k] - a
    idx = np.concatenate([np.arange(k, s.n_slots), np.arange(0, k + 1)])
    frac = s.fractions[idx].copy()
    levels = s.levels[idx].copy()
    mid = s.levels[k]
    slope = s.slopes[k]
    # second half of slot k first, its first half last
    frac[0] = b / s.period
    levels[0] = mid + slope * 0.5 * a
    frac[-1] = a / s.period
    levels[-1] = mid - slope * 0.5 * b
    keep = frac > 0
    sched = StimulusSchedule(s.period, s.kind, levels[keep], frac[keep], s.slopes[idx][keep],
                             s.holds[idx][keep], s.segment_ids[idx][keep], s.center, s.span)
    return sched, u.with_values(u.values[idx][keep])


def closure_gap(s: StimulusSchedule) -> float:
    """``E_M(T) - E_M(0)`` for a ramp schedule, ``|gap|`` in stimulus units."""
    return float(math.fsum(s.slopes * s.dwells))


# ---------------------------------------------------------------------------
# verification

def _match_levels(levels, grid, tol):
    """Index of the grid point each level coincides with, or -1."""
    grid = np.asarray(grid, dtype=float)
    order = np.argsort(grid)
    g = grid[order]
    k = np.clip(np.searchsorted(g, levels), 0, g.size - 1)
    best = np.where(np.abs(g[k] - levels) <= tol, k, -1)
    k2 = np.clip(k - 1, 0, g.size - 1)
    best = np.where((best < 0) & (np.abs(g[k2] - levels) <= tol), k2, best)
    return np.where(best >= 0, order[np.maximum(best, 0)], -1)


def hold_masses(s: StimulusSchedule, u: ReferenceWaveform):
    """Point masses ``u tau / T`` of the hold slots, merged per level."""
    lv = s.absolute_levels[s.holds]
    m = (u.values * s.fractions)[s.holds]
    uniq, inv = np.unique(lv, return_inverse=True)
    out = np.zeros(uniq.size)
    np.add.at(out, inv, m)
    return uniq, out


def _sweep_density(s: StimulusSchedule, u: ReferenceWaveform, grid):
    """``T^-1 sum_visits u / |E'_M|`` from the sweep slots, second order."""
    grid = np.asarray(grid, dtype=float)
    dens = np.zeros(grid.size)
    covered = np.zeros(grid.size, dtype=bool)
    sweep = ~s.holds
    if not np.any(sweep):
        return dens, covered
    idx = np.flatnonzero(sweep)
    t_mid = s.starts + 0.5 * s.dwells
    E = s.absolute_levels
    # runs: consecutive sweep slots of one segment, split at direction reversals
    runs = []
    cur = [idx[0]]
    for a, b in zip(idx[:-1], idx[1:]):
        if b == a + 1 and s.segment_ids[a] == s.segment_ids[b]:
            cur.append(b)
        else:
            runs.append(cur)
            cur = [b]
    runs.append(cur)
    pieces = []
    for r in runs:
        r = np.asarray(r)
        if r.size < 3:
            continue
        d = np.sign(np.diff(E[r]))
        start = 0
        for k in range(1, d.size):
            if d[k] != d[k - 1] and d[k] != 0:
                pieces.append(r[start:k + 1])
                start = k
        pieces.append(r[start:])
    for p in pieces:
        if p.size < 3:
            continue
        e, t, v = E[p], t_mid[p], u.values[p]
        # differentiate time with respect to stimulus: dt/dE follows |K| and
        # stays smooth at zeros of the profile, where dE/dt does not
        order = np.argsort(e)
        e, t, v = e[order], t[order], v[order]
        local = v * np.abs(np.gradient(t, e, edge_order=2)) / s.period
        inside = (grid >= e[0]) & (grid <= e[-1])
        if np.any(inside):
            dens[inside] += np.interp(grid[inside], e, local)
            covered |= inside
    return dens, covered


def effective_weighting(s: StimulusSchedule, u: ReferenceWaveform, grid) -> np.ndarray:
    """Left side of the stimulus/reference consistency equation on ``grid``.

    Hold slots contribute point masses ``u_i tau_i / T`` at their level;
    sweep slots contribute the density ``T^-1 sum u(t_i) / |E'_M(t_i)|`` over
    all visits of each grid level.  No calibration gain is applied.
    """
    grid = np.asarray(grid, dtype=float)
    if u.values.size != s.n_slots:
        raise ValueError("reference is not aligned with the schedule slots")
    out = np.zeros(grid.size)
    if np.any(s.holds):
        lv, m = hold_masses(s, u)
        tol = 1e-12 * max(1.0, s.span, float(np.max(np.abs(grid))) if grid.size else 1.0)
        k = _match_levels(lv, grid, tol)
        ok = k >= 0
        np.add.at(out, k[ok], m[ok])
    dens, _ = _sweep_density(s, u, grid)
    return out + dens


def verify_synthesis(s: StimulusSchedule, u: ReferenceWaveform, w, grid=None) -> SynthesisReport:
    """Residual of the consistency equation against a target weighting.

    Discrete targets are compared node by node (pass below 1e-9).
    Continuous targets compare delta masses exactly and the profile on a grid
    of the covered range, relative to the profile maximum (pass below 1e-4).
    Grid points within one sweep cell of a sign change or delta are skipped.
    """
    calib = u.calibration
    notes = []
    if isinstance(w, DiscreteWeighting):
        levels = s.absolute_levels
        tol = 1e-12 * max(1.0, s.span, float(np.max(np.abs(w.nodes))))
        eff = np.zeros(w.nodes.size)
        k = _match_levels(levels, w.nodes, tol)
        if np.any(k < 0):
            notes.append(f"{int(np.sum(k < 0))} slots at levels without a target node")
        ok = k >= 0
        np.add.at(eff, k[ok], (u.values * s.fractions)[ok])
        visited = np.zeros(w.nodes.size, dtype=bool)
        visited[k[ok]] = True
        if np.any(~visited & (w.weights != 0)):
            raise CoverageError("nonzero weight at a node the schedule never visits")
        resid = eff - w.weights / calib
        resid[k[~ok]] = 0
        extra = (u.values * s.fractions)[~ok]
        scale = calib
        r = np.concatenate([resid, extra]) * scale
        max_norm = float(np.max(np.abs(r))) if r.size else 0.0
        l2 = float(np.sqrt(np.sum(r ** 2)))
        tol_pass = 1e-9
        return SynthesisReport(max_norm, l2, max_norm < tol_pass, tol_pass, w.nodes.size, 1.0, notes)

    if not isinstance(w, ContinuousWeighting):
        raise TypeError("verify_synthesis expects a 1-D weighting")
    lo, hi = w.support
    # deltas
    lv, m = hold_masses(s, u)
    r_delta = []
    for x, mass in w.deltas:
        k = _match_levels(np.array([x]), lv, 1e-12 * max(1.0, abs(x), s.span))[0]
        got = m[k] * calib if k >= 0 else 0.0
        r_delta.append(got - mass)
    # profile
    sweep_E = s.absolute_levels[~s.holds]
    if grid is None:
        if sweep_E.size:
            grid = np.linspace(np.min(sweep_E), np.max(sweep_E), 2001)
        else:
            grid = np.array([])
    grid = np.asarray(grid, dtype=float)
    cell = 0.0
    if sweep_E.size > 1:
        cell = float(np.max(np.diff(np.sort(sweep_E))))
    bad = list(w.sign_changes()) + [x for x, _ in w.deltas]
    keep = np.ones(grid.size, dtype=bool)
    for x in bad:
        keep &= np.abs(grid - x) > cell
    skipped = int(np.sum(~keep))
    if skipped:
        notes.append(f"skipped {skipped} grid points within one cell of a sign change or delta")
    grid = grid[keep]
    dens, covered = _sweep_density(s, u, grid)
    target = w(grid)
    if np.any(~covered & (target != 0)):
        raise CoverageError("nonzero weight at stimulus levels the schedule never visits")
    scale = float(np.max(np.abs(target))) if target.size else 1.0
    scale = scale or 1.0
    r_prof = (calib * dens - target) / scale
    r = np.concatenate([r_prof, np.asarray(r_delta) / scale])
    max_norm = float(np.max(np.abs(r))) if r.size else 0.0
    l2 = float(np.sqrt(np.mean(r ** 2))) if r.size else 0.0
    tol_pass = 1e-9 if s.kind == "stepwise" else 1e-4
    return SynthesisReport(max_norm, l2, max_norm < tol_pass, tol_pass, int(r.size), scale, notes)


def gamma_linearity_residual(s: StimulusSchedule, w: ContinuousWeighting) -> float:
    """Max deviation of ``Gamma(E_M(t))`` from the straight line ``Gamma_total t / T``.

    ``Gamma`` here is recomputed by adaptive quadrature, independently of
    the accumulator used during synthesis, and includes delta masses to the
    left of each level.  Only sweep slots are checked (holds sit on jumps).
    Relative to ``Gamma_total``.
    """
    lo, _ = w.support
    total = w.gamma_total
    t_mid = s.starts + 0.5 * s.dwells
    worst = 0.0
    E = s.absolute_levels
    kinks = np.asarray(w.sign_changes())
    for k in np.flatnonzero(~s.holds):
        e = E[k]
        pts = kinks[(kinks > lo) & (kinks < e)]
        g, _ = integrate.quad(lambda x: abs(float(w(x))), lo, e, epsabs=1e-13, epsrel=1e-12,
                              limit=200, points=pts if pts.size else None)
        g += sum(abs(m) for x, m in w.deltas if x < e or (x == e and x == lo))
        worst = max(worst, abs(g - total * t_mid[k] / s.period))
    return worst / total


# ---------------------------------------------------------------------------
# serialization

def schedule_to_dict(s: StimulusSchedule, u: ReferenceWaveform) -> dict:
    segs = []
    for k in range(s.n_slots):
        seg = {"level": float(s.levels[k]), "dwell": float(s.dwells[k]),
               "fraction": float(s.fractions[k]), "ref": float(u.values[k])}
        if s.slopes[k] != 0:
            seg["slope"] = float(s.slopes[k])
        if s.holds[k] != (s.kind == "stepwise"):
            seg["hold"] = bool(s.holds[k])
        if s.segment_ids[k] != k:
            seg["segment"] = int(s.segment_ids[k])
        segs.append(seg)
    out = {"period": s.period, "kind": s.kind, "center": s.center, "span": s.span,
           "reference_kind": u.kind, "gain": u.gain(s.period), "calibration": u.calibration,
           "segments": segs}
    if u.u0 is not None:
        out["u0"] = u.u0
    if u.omega0 is not None:
        out["omega0"] = u.omega0
    return out


def schedule_from_dict(d: dict):
    segs = d["segments"]
    kind = d["kind"]

    levels = np.array([g["level"] for g in segs], dtype=float)
    frac = np.array([g["fraction"] if "fraction" in g else g["dwell"] / d["period"] for g in segs])
    slopes = np.array([g.get("slope", 0.0) for g in segs])
    holds = np.array([g.get("hold", kind == "stepwise") for g in segs], dtype=bool)
    seg = np.array([g.get("segment", k) for k, g in enumerate(segs)], dtype=int)
    s = StimulusSchedule(d["period"], kind, levels, frac, slopes, holds, seg, d.get("center", 0.0),
                         d.get("span"))
    cal = d["calibration"] if "calibration" in d else d["gain"] * d["period"]
    u = ReferenceWaveform(d.get("reference_kind", "bilevel"), [g["ref"] for g in segs], cal,
                          d.get("u0"), d.get("omega0"))
    return s, u


def schedule_to_json(s: StimulusSchedule, u: ReferenceWaveform) -> str:
    return json.dumps(schedule_to_dict(s, u))


def schedule_from_json(text: str):
    return schedule_from_dict(json.loads(text))


def waveform_csv(s: StimulusSchedule, u: Optional[ReferenceWaveform] = None,
                 points_per_slot: int = 2) -> str:
    """Two-column ``t,E_M`` table over one period (plus ``u`` when given)."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["t", "E_M"] + (["u"] if u is not None else []))
    starts = s.starts
    for k in range(s.n_slots):
        for q in range(points_per_slot):
            t = starts[k] + s.dwells[k] * q / max(points_per_slot - 1, 1)
            e = s.levels[k] + s.slopes[k] * (t - starts[k] - 0.5 * s.dwells[k])
            row = [repr(float(t)), repr(float(e))]
            if u is not None:
                row.append(repr(float(u.values[k])))
            wr.writerow(row)
    return buf.getvalue()
