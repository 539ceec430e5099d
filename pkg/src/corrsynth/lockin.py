"""Conventional harmonic-modulation / lock-in baseline and the comparison harness.

The lock-in channel stimulates with ``E_c + a sin(w0 t)`` and correlates the
response with ``sin(w0 t + phase)`` over whole periods, scaled by ``2 / a``.
Its noiseless output is the derivative smeared by a semicircle of radius
``a``.  Integrating it once restores the curve, twice the area.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize

from .dut import Characteristic1D, full_auger_current
from .errors import CalibrationError, DomainError
from .meter import MeasurementConfig, measure
from .noise import NoiseModel
from .synthesis import ReferenceWaveform, StimulusSchedule, synthesize_continuous, synthesize_discrete
from .weighting import boxcar_with_end_deltas, delta_minus_comb, richardson_derivative

TARGETS = ("full_current", "curve", "derivative")


@dataclass(frozen=True)
class LockinConfig:
    amplitude: float
    omega0: float = 2 * math.pi
    harmonic: int = 1
    phase: float = 0.0
    cells: int = 256
    integration: str = "trapezoid"
    correction: Optional[str] = None
    regularization: float = 1e-3

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ValueError("modulation amplitude must be positive")
        if not self.omega0 > 0:
            raise ValueError("modulation frequency must be positive")
        if self.harmonic < 1:
            raise ValueError("reference harmonic order must be >= 1")
        if self.cells < 8:
            raise ValueError("cells must be >= 8")
        if self.integration != "trapezoid":
            raise ValueError("only trapezoid integration is supported")
        if self.correction not in (None, "none", "deconvolution"):
            raise ValueError(f"unknown correction {self.correction!r}")

    @property
    def period(self) -> float:
        return 2 * math.pi / self.omega0


def harmonic_schedule(amplitude: float, T: float, cells: int = 256, harmonic: int = 1,
                      phase: float = 0.0):
    """Sampled sine stimulus of amplitude ``a`` and its lock-in reference.

    Levels and reference are taken at equal-time cell midpoints, which keeps
    the discrete sine/cosine sums orthogonal, so a linear response gives its
    slope exactly.
    """
    theta = 2 * np.pi * (np.arange(cells) + 0.5) / cells
    s = StimulusSchedule(T, "harmonic", amplitude * np.sin(theta), np.full(cells, 1.0 / cells),
                         holds=np.zeros(cells, bool), segment_ids=np.zeros(cells, int),
                         span=2 * amplitude)
    u = ReferenceWaveform("harmonic", np.sin(harmonic * theta + phase), calibration=2.0 / amplitude,
                          u0=1.0, omega0=2 * np.pi / T)
    return s, u


def lockin_response(dut: Characteristic1D, amplitude: float, E_c, cells: int = 256,
                    harmonic: int = 1, phase: float = 0.0) -> np.ndarray:
    """Noiseless lock-in output at each ``E_c`` (vectorized)."""
    E_c = np.atleast_1d(np.asarray(E_c, dtype=float))
    theta = 2 * np.pi * (np.arange(cells) + 0.5) / cells
    E = E_c[:, None] + amplitude * np.sin(theta)[None, :]
    if not dut.contains(E):
        raise DomainError("modulated stimulus leaves the device domain")
    I = dut.informative_curve(E) + dut.background_curve(E)
    return (2.0 / amplitude) * np.mean(I * np.sin(harmonic * theta + phase), axis=-1)


def lockin_measure(dut: Characteristic1D, config: LockinConfig, noise: Optional[NoiseModel], E_c: float,
                   periods: int = 1, trials: int = 1, seed=None):
    """Simulated lock-in derivative estimate at ``E_c``.

    Returns a :class:`~corrsynth.meter.MeasurementResult`.
    """
    a = config.amplitude
    if not dut.contains([E_c - a, E_c + a]):
        raise DomainError(f"E_c +- amplitude leaves device domain {dut.domain}")
    s, u = harmonic_schedule(a, config.period, config.cells, config.harmonic, config.phase)
    cfg = MeasurementConfig(periods=periods, trials=trials, seed=seed if isinstance(seed, int) else None)
    rng = seed if isinstance(seed, np.random.Generator) else None
    return measure(dut, s, u, noise, cfg, E_c=E_c, rng=rng)


def _uniform_step(E):
    E = np.asarray(E, dtype=float)
    if E.size < 2:
        raise ValueError("need at least two grid points")
    d = np.diff(E)
    if not np.allclose(d, d[0], rtol=1e-9, atol=0):
        raise ValueError("control grid must be uniform")
    return d[0]


def restore_curve(derivative, E) -> np.ndarray:
    """Cumulative trapezoid of the derivative, zero at the leftmost point.

    ``derivative`` may carry leading trial axes.
    """
    _uniform_step(E)
    return integrate.cumulative_trapezoid(np.asarray(derivative, dtype=float), E, axis=-1, initial=0.0)


def restore_area(curve, E):
    """Trapezoid area under the restored curve."""
    _uniform_step(E)
    return integrate.trapezoid(np.asarray(curve, dtype=float), E, axis=-1)


def broadening_operator(E, amplitude: float, cells: int = 256) -> np.ndarray:
    """Matrix taking curve samples on ``E`` to noiseless lock-in outputs on ``E``.

    Built by running the lock-in sum on piecewise-linear basis curves, so it
    is the numerically tabulated harmonic transfer of the actual stimulus.
    Outside the grid the curve is held at its end value.
    """
    E = np.asarray(E, dtype=float)
    n = E.size
    theta = 2 * np.pi * (np.arange(cells) + 0.5) / cells
    x = np.clip(E[:, None] + amplitude * np.sin(theta)[None, :], E[0], E[-1])
    k = np.clip(np.searchsorted(E, x, side="right") - 1, 0, n - 2)
    frac = (x - E[k]) / (E[k + 1] - E[k])
    wgt = (2.0 / amplitude) * np.sin(theta)[None, :] / cells
    A = np.zeros((n, n))
    rows = np.repeat(np.arange(n), cells)
    np.add.at(A, (rows, k.ravel()), (wgt * (1 - frac)).ravel())
    np.add.at(A, (rows, k.ravel() + 1), (wgt * frac).ravel())
    return A


def deconvolve(derivative, E, amplitude: float, regularization: float = 1e-3,
               cells: int = 256) -> np.ndarray:
    """Curve estimate undoing modulation broadening (Tikhonov-regularized).

    Solves ``min |A c - D|^2 + lam |second difference of c|^2`` with
    ``c[0] = 0``.  Lower systematic error than plain integration, at the cost
    of amplified noise.
    """
    E = np.asarray(E, dtype=float)
    D = np.asarray(derivative, dtype=float)
    A = broadening_operator(E, amplitude, cells)[:, 1:]
    n = E.size
    L = np.diff(np.eye(n), 2, axis=0)[:, 1:]
    h = _uniform_step(E)
    lam = regularization * np.linalg.norm(A, 2) ** 2 / max(np.linalg.norm(L, 2), 1e-300) ** 2
    M = A.T @ A + lam * (L.T @ L)
    rhs = np.moveaxis(D, -1, 0)
    sol = np.linalg.solve(M, A.T @ rhs.reshape(n, -1)).reshape((n - 1,) + rhs.shape[1:])
    out = np.concatenate([np.zeros((1,) + sol.shape[1:]), sol], axis=0)
    return np.moveaxis(out, 0, -1)


# ---------------------------------------------------------------------------
# comparison

@dataclass
class ComparisonReport:
    target: str
    budget: float
    systematic_error_lockin: float
    systematic_error_optimal: float
    variance_lockin: float
    variance_optimal: float
    ratio: float
    test_time_lockin: float
    test_time_optimal: float
    trials: int
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    CSV_COLUMNS = ("target", "budget", "systematic_error_lockin", "systematic_error_optimal",
                   "variance_lockin", "variance_optimal", "ratio", "test_time_lockin",
                   "test_time_optimal", "trials")

    def csv_row(self) -> list:
        return [self.target] + [repr(float(getattr(self, c))) for c in self.CSV_COLUMNS[1:-1]] + [
            str(self.trials)]


def reports_csv(reports: Sequence[ComparisonReport], seed=None) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(list(ComparisonReport.CSV_COLUMNS) + ["seed"])
    for r in reports:
        wr.writerow(r.csv_row() + [str(seed)])
    return buf.getvalue()


def _peak_geometry(dut: Characteristic1D):
    p = dut.params
    if "center" in p and "width" in p:
        return float(p["center"]), float(p["width"])
    lo, hi = dut.domain
    return 0.5 * (lo + hi), (hi - lo) / 16


def _tune(err, lo, hi, budget, what):
    f = lambda x: err(x) - budget
    flo, fhi = f(lo), f(hi)
    if flo > 0 or fhi < 0:
        raise CalibrationError(
            f"{what}: systematic error spans [{err(lo):.3g}, {err(hi):.3g}], budget {budget:.3g} unreachable")
    return optimize.brentq(f, lo, hi, xtol=1e-12 * hi, rtol=1e-12)


def _max_rel(est, truth):
    return float(np.max(np.abs(est - truth)) / np.max(np.abs(truth)))


class _Comparison:
    """Shared set-up of one comparison: scan grid, tuned systems, Monte-Carlo."""

    def __init__(self, dut, budget, test_time, noise, trials, points, seed, cells):
        if not 0.01 <= budget <= 0.10:
            raise ValueError("systematic-error budget must lie in [1%, 10%]")
        if dut.derivative is None:
            raise ValueError("comparison needs a device with an analytic derivative")
        self.dut = dut
        self.budget = budget
        self.test_time = float(test_time)
        self.noise = noise
        self.trials = int(trials)
        self.seed = seed
        self.cells = cells
        c, sig = _peak_geometry(dut)
        self.c, self.sig = c, sig
        self.E = np.linspace(c - 4 * sig, c + 4 * sig, points)
        self.T_point = self.test_time / points
        self.true_d = dut.derivative(self.E)
        self.true_c = dut.informative_curve(self.E) - dut.informative_curve(self.E[0])
        self.true_area = full_auger_current(dut, self.E[0], self.E[-1])
        lo, hi = dut.domain
        a_max = min(self.E[0] - lo, hi - self.E[-1])
        # both systems get an ideal noiseless subtraction of their own background output
        self.bg = Characteristic1D(lambda E: np.zeros(np.shape(E)), dut.background_curve, dut.domain)
        err = lambda a: _max_rel(lockin_response(dut, a, self.E, cells)
                                 - lockin_response(self.bg, a, self.E, cells), self.true_d)
        self.amplitude = _tune(err, 1e-3 * sig, min(a_max, 3 * sig), budget, "lock-in amplitude")
        self.bg_D = lockin_response(self.bg, self.amplitude, self.E, cells)
        self.ss = np.random.SeedSequence(seed)
        self._lockin = None

    def lockin_trials(self):
        if self._lockin is None:
            cfg = LockinConfig(self.amplitude, 2 * math.pi / self.T_point, cells=self.cells)
            kids = self.ss.spawn(self.E.size)
            est = np.empty((self.trials, self.E.size))
            for k, e in enumerate(self.E):
                r = lockin_measure(self.dut, cfg, self.noise, e, trials=self.trials,
                                   seed=np.random.default_rng(kids[k]))
                est[:, k] = r.trial_estimates
            self._lockin = est
        return self._lockin

    def lockin(self, target):
        D = self.lockin_trials() - self.bg_D
        D0 = lockin_response(self.dut, self.amplitude, self.E, self.cells) - self.bg_D
        if target == "derivative":
            return _max_rel(D0, self.true_d), float(np.mean(np.var(D, axis=0, ddof=1)))
        C0 = restore_curve(D0, self.E)
        C = restore_curve(D, self.E)
        if target == "curve":
            return _max_rel(C0, self.true_c), float(np.mean(np.var(C[:, 1:], axis=0, ddof=1)))
        A0 = restore_area(C0, self.E)
        A = restore_area(C, self.E)
        return abs(A0 - self.true_area) / abs(self.true_area), float(np.var(A, ddof=1))

    def _per_point(self, make, truth):
        kids = self.ss.spawn(self.E.size)
        est = np.empty((self.trials, self.E.size))
        noiseless = np.empty(self.E.size)
        cfg = MeasurementConfig(trials=self.trials)
        for k, e in enumerate(self.E):
            w = make(e)
            s, u = synthesize_discrete(w, self.T_point)
            r = measure(self.dut, s, u, self.noise, cfg, rng=np.random.default_rng(kids[k]))
            bg = measure(self.bg, s, u).noiseless
            est[:, k] = r.trial_estimates - bg
            noiseless[k] = r.noiseless - bg
        return _max_rel(noiseless, truth), float(np.mean(np.var(est, axis=0, ddof=1)))

    def optimal(self, target):
        dut, c, sig = self.dut, self.c, self.sig
        lo, hi = dut.domain
        if target == "derivative":
            ratio = 2.5
            h_max = min(self.E[0] - lo, hi - self.E[-1]) / ratio

            def err(h):
                est = np.array([np.sum(w.weights * dut.informative_curve(w.nodes)) for w in
                                (richardson_derivative(e, h, ratio) for e in self.E)])
                return _max_rel(est, self.true_d)

            h = _tune(err, 1e-3 * sig, min(h_max, 2 * sig), self.budget, "derivative stencil step")
            self.details_opt = dict(weighting="richardson_derivative", step=h, ratio=ratio)
            return self._per_point(lambda e: richardson_derivative(e, h, ratio), self.true_d)
        if target == "curve":
            L, H = c - 5 * sig, c + 5 * sig
            if L < lo or H > hi:
                L, H = lo, hi
            self.details_opt = dict(weighting="delta_minus_comb", comb=[L, H])
            base = dut.informative_curve(self.E[0])

            def make(e):
                a_lo = (H - e) / (H - L)
                return delta_minus_comb(e, [L, H], [a_lo, 1 - a_lo])

            # estimate targets the curve above the background line, shifted like the lock-in curve
            sys_err, var = self._per_point(make, self.true_c + base)
            return sys_err, var
        # full current: one boxcar window measured over the whole test time
        k_max = min(c - lo, hi - c) / sig

        def est_area(k):
            w = boxcar_with_end_deltas(c - k * sig, c + k * sig)
            return _window_integral(dut, w)

        err = lambda k: abs(est_area(k) - self.true_area) / abs(self.true_area)
        k = _tune_decreasing(err, 0.5, min(k_max, 6.0), self.budget)
        w = boxcar_with_end_deltas(c - k * sig, c + k * sig)
        s, u = synthesize_continuous(w, self.test_time, samples=1024)
        r = measure(dut, s, u, self.noise, MeasurementConfig(trials=self.trials),
                    rng=np.random.default_rng(self.ss.spawn(1)[0]))
        self.details_opt = dict(weighting="boxcar_with_end_deltas", half_width=k * sig)
        bg = measure(self.bg, s, u).noiseless
        sys_err = abs(r.noiseless - bg - self.true_area) / abs(self.true_area)
        return sys_err, float(np.var(r.trial_estimates, ddof=1))

    def report(self, target) -> ComparisonReport:
        if target not in TARGETS:
            raise ValueError(f"unknown comparison target {target!r}")
        se_l, var_l = self.lockin(target)
        se_o, var_o = self.optimal(target)
        return ComparisonReport(
            target=target, budget=self.budget, systematic_error_lockin=se_l,
            systematic_error_optimal=se_o, variance_lockin=var_l, variance_optimal=var_o,
            ratio=var_l / var_o, test_time_lockin=self.test_time, test_time_optimal=self.test_time,
            trials=self.trials,
            details=dict(amplitude=self.amplitude, points=int(self.E.size),
                         scan=[float(self.E[0]), float(self.E[-1])], optimal=self.details_opt))


def _window_integral(dut, w) -> float:
    lo, hi = w.support
    val = full_auger_current(dut, lo, hi)
    return val + sum(m * float(dut.informative_curve(np.asarray(x))) for x, m in w.deltas)


def _tune_decreasing(err, lo, hi, budget):
    f = lambda x: err(x) - budget
    if f(lo) < 0 or f(hi) > 0:
        raise CalibrationError(
            f"boxcar window: systematic error spans [{err(hi):.3g}, {err(lo):.3g}], budget {budget:.3g} unreachable")
    return optimize.brentq(f, lo, hi, xtol=1e-12, rtol=1e-12)


def compare_systems(dut: Characteristic1D, target="full_current", budget: float = 0.04,
                    test_time: float = 21.0, noise: Optional[NoiseModel] = None, trials: int = 2000,
                    points: int = 21, seed: Optional[int] = 0, cells: int = 256):
    """Lock-in versus optimal correlation system at equal test time and error budget.

    The lock-in amplitude is tuned so the noiseless derivative deviates from
    the analytic one by ``budget`` (max over the scan, relative to the peak
    derivative); curve and area use that same amplitude with one and two
    integrations.  The optimal system uses a Richardson derivative stencil
    (tuned to the budget), a background-line comb for the curve, and a single
    boxcar window for the full current (tuned to the budget).  Both spend
    ``test_time`` in total; scanned targets give each of ``points`` control
    levels one equal period.  Each system's noiseless response to the
    background alone is subtracted from its output, so both are judged on
    the informative curve.  Vector targets report the mean per-point
    variance.

    ``target`` may be a string (one report) or a sequence (list of reports
    sharing one lock-in Monte-Carlo run).
    """
    if noise is None:
        noise = NoiseModel("white", P_n=1e-4)
    if trials < 1000:
        raise ValueError("comparison needs >= 1000 Monte-Carlo trials")
    comp = _Comparison(dut, budget, test_time, noise, trials, points, seed, cells)
    if isinstance(target, str):
        return comp.report(target)
    return [comp.report(t) for t in target]
