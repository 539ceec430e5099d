"""Correlation meter: stimulate a device, correlate with the reference, filter.

One modulation period is the atomic estimate ``gain * int_0^T I(t) u(t) dt``.
Each slot of the schedule is split into equal sub-intervals (at least
``ceil(dwell * sample_rate)``), the response is evaluated at their midpoints
and white noise is drawn as exact sub-interval integrals.  For stepwise
schedules this makes every estimate exact; for ramps it is the midpoint rule.
Estimates from ``periods`` consecutive periods are combined by the filter.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dut import Characteristic1D, DynamicDut
from .errors import AlignmentError, AliasingError, DomainError
from .noise import NoiseModel, generate_noise
from .synthesis import DualChannelSchedule, ReferenceWaveform, StimulusSchedule

_BATCH_ELEMENTS = 2_000_000


@dataclass(frozen=True)
class MeasurementConfig:
    """``periods`` per estimate, sub-sampling rate and filtering.

    ``sample_rate=None`` picks two sub-samples in the shortest slot.
    ``filter`` is ``"boxcar"`` (mean over periods) or ``"lowpass"``
    (single-pole recursion with ``cutoff`` in Hz, output after the last
    period).  ``gain`` is ``"apply"`` or ``"raw"``.
    """

    periods: int = 1
    sample_rate: Optional[float] = None
    filter: str = "boxcar"
    cutoff: Optional[float] = None
    slot_mode: bool = False
    gain: str = "apply"
    trials: int = 1
    seed: Optional[int] = None

    def __post_init__(self):
        if self.periods < 1:
            raise ValueError("periods must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.filter not in ("boxcar", "lowpass"):
            raise ValueError(f"unknown filter {self.filter!r}")
        if self.filter == "lowpass" and not (self.cutoff and self.cutoff > 0):
            raise ValueError("lowpass filter needs a positive cutoff")
        if self.gain not in ("apply", "raw"):
            raise ValueError("gain must be 'apply' or 'raw'")
        if self.sample_rate is not None and not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    def replace(self, **kw) -> "MeasurementConfig":
        d = dict(self.__dict__)
        d.update(kw)
        return MeasurementConfig(**d)


@dataclass(frozen=True)
class ControlSweep:
    """Waypoints of the slow control level ``E_c``.

    Each waypoint is held for the measurement's ``periods``; the sweep rate
    is the waypoint spacing divided by that time unless given explicitly.
    """

    waypoints: tuple
    sweep_rate: Optional[float] = None
    margin: float = 1.0

    def __post_init__(self):
        w = tuple(float(x) for x in self.waypoints)
        if len(w) < 1:
            raise ValueError("sweep needs at least one waypoint")
        if not 0 < self.margin <= 1:
            raise ValueError("aliasing margin must be in (0, 1]")
        object.__setattr__(self, "waypoints", w)

    @classmethod
    def uniform(cls, start, stop, points, **kw):
        return cls(tuple(np.linspace(start, stop, points)), **kw)


@dataclass
class MeasurementResult:
    estimate: float
    trial_estimates: np.ndarray
    period_values: np.ndarray
    sample_variance: float
    noiseless: float
    metadata: dict = field(default_factory=dict)


@dataclass
class SweepResult:
    E_c: np.ndarray
    estimates: np.ndarray
    sample_variances: np.ndarray
    rate: float
    limit: float
    results: list = field(default_factory=list)

    def reconstruct(self, E) -> np.ndarray:
        """Band-limited (sinc) interpolation through the waypoint estimates."""
        E = np.asarray(E, dtype=float)
        if self.E_c.size < 2:
            return np.full(E.shape, self.estimates[0])
        step = self.E_c[1] - self.E_c[0]
        if not np.allclose(np.diff(self.E_c), step, rtol=1e-9, atol=0):
            return np.interp(E, self.E_c, self.estimates)
        x = (E[..., None] - self.E_c) / step
        return np.sinc(x) @ self.estimates


@dataclass
class SelfTestReport:
    name: str
    expected: float
    measured: float
    deviation: float
    tolerance: float
    passed: bool
    factor: float


# ---------------------------------------------------------------------------
# internals

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CORRSYNTH_THREADS", "1")))
    except ValueError:
        return 1


class _Layout:
    """Sub-interval grid of one period."""

    def __init__(self, s: StimulusSchedule, sample_rate: Optional[float]):
        dw = s.dwells
        if sample_rate is None:
            sample_rate = 2.0 / float(np.min(dw))
        if sample_rate * float(np.min(dw)) < 2 * (1 - 1e-9):
            raise ValueError(
                f"sample_rate {sample_rate:g} gives < 2 samples in the shortest slot ({np.min(dw):g} s)")
        counts = np.maximum(1, np.ceil(dw * sample_rate - 1e-9).astype(int))
        self.sample_rate = float(sample_rate)
        self.counts = counts
        self.slot = np.repeat(np.arange(s.n_slots), counts)
        self.h = np.repeat(dw / counts, counts)
        starts = s.starts
        k = np.arange(self.slot.size) - np.repeat(np.cumsum(counts) - counts, counts)
        self.t_lo = starts[self.slot] + k * self.h
        self.t_mid = self.t_lo + 0.5 * self.h
        offset = self.t_mid - (starts[self.slot] + 0.5 * dw[self.slot])
        self.levels = s.levels[self.slot] + s.slopes[self.slot] * offset
        self.rates = s.slopes[self.slot]
        self.period = s.period
        self.n_slots = s.n_slots


def _stimulus_check(dut, s: StimulusSchedule, E_c: float):
    half = 0.5 * np.abs(s.slopes) * s.dwells
    lo = E_c + s.levels - half
    hi = E_c + s.levels + half
    E = np.concatenate([lo, hi])
    if isinstance(dut, DynamicDut):
        (e0, e1), (r0, r1) = dut.domain
        tol = 1e-12 * max(1.0, abs(e0), abs(e1))
        if np.any((E < e0 - tol) | (E > e1 + tol)):
            raise DomainError(f"stimulus range [{E.min():g}, {E.max():g}] outside device area {dut.domain}")
        if np.any((s.slopes < r0) | (s.slopes > r1)):
            raise DomainError("sweep speeds outside device area")
    elif not dut.contains(E):
        raise DomainError(f"stimulus range [{E.min():g}, {E.max():g}] outside device domain {dut.domain}")


def _response(dut, lay: _Layout, E_c: float) -> np.ndarray:
    E = E_c + lay.levels
    if isinstance(dut, DynamicDut):
        return np.asarray(dut(E, lay.rates), dtype=float)
    lo, hi = dut.domain
    E = np.clip(E, lo, hi)
    return np.asarray(dut.informative_curve(E) + dut.background_curve(E), dtype=float)


def _noise_integrals(noise: NoiseModel, lay: _Layout, periods: int, trials: int, rng) -> np.ndarray:
    """Noise integrated over each sub-interval, shape ``(trials, periods, n_sub)``."""
    n = lay.h.size
    if noise is None or noise.is_zero:
        return None
    if noise.kind == "white":
        z = rng.standard_normal((trials, periods, n))
        return z * np.sqrt(noise.P_n * lay.h)
    # coloured: uniform stream, then exact integrals of the piecewise-constant stream
    fs = lay.sample_rate
    T = lay.period
    total = periods * T
    stream = generate_noise(noise, total, fs, seed=rng, trials=trials)
    m = stream.shape[-1]
    cum = np.concatenate([np.zeros((trials, 1)), np.cumsum(stream, axis=-1) / fs], axis=-1)
    grid = np.arange(m + 1) / fs
    edges = np.concatenate([lay.t_lo, [T]])
    t = (np.arange(periods)[:, None] * T + edges[None, :]).ravel()
    t = np.minimum(t, grid[-1])
    out = np.empty((trials, periods * (n + 1)))
    for k in range(trials):
        out[k] = np.interp(t, grid, cum[k])
    out = out.reshape(trials, periods, n + 1)
    return np.diff(out, axis=-1)


def _combine(values: np.ndarray, config: MeasurementConfig, T: float) -> np.ndarray:
    """Filter per-period values (last axis) into one estimate per trial."""
    if config.filter == "boxcar" or values.shape[-1] == 1:
        return values.mean(axis=-1)
    alpha = 1.0 - math.exp(-2 * math.pi * config.cutoff * T)
    y = values[..., 0].copy()
    for k in range(1, values.shape[-1]):
        y += alpha * (values[..., k] - y)
    return y


def _correlate(r_det, xi, u_sub, lay: _Layout, slot_mode: bool, dwells) -> np.ndarray:
    """Raw per-period correlation ``int I u dt``, shape ``(trials, periods)``."""
    if slot_mode:
        det = np.bincount(lay.slot, weights=r_det * lay.h, minlength=lay.n_slots)
        u = u_sub[np.cumsum(lay.counts) - 1]
        if xi is None:
            means = det / dwells
            return np.array([[math.fsum(means * u * dwells)]])
        # per-slot sums of the noise integrals
        idx = np.concatenate([[0], np.cumsum(lay.counts)[:-1]])
        sums = np.add.reduceat(xi, idx, axis=-1)
        means = (det + sums) / dwells
        return means @ (u * dwells)
    det = math.fsum(r_det * u_sub * lay.h)
    if xi is None:
        return np.array([[det]])
    return det + xi @ u_sub


def _run(dut, s: StimulusSchedule, refs: Sequence[ReferenceWaveform], noise, config: MeasurementConfig,
         E_c: float, rng):
    lay = _Layout(s, config.sample_rate)
    r_det = _response(dut, lay, E_c)
    gains = [(u.gain(s.period) if config.gain == "apply" else 1.0) for u in refs]
    u_subs = [u.values[lay.slot] for u in refs]
    noiseless = [g * _correlate(r_det, None, us, lay, config.slot_mode, s.dwells)[0, 0]
                 for g, us in zip(gains, u_subs)]
    per_period = [[] for _ in refs]
    n = lay.h.size
    batch = max(1, _BATCH_ELEMENTS // (config.periods * n))
    done = 0
    while done < config.trials:
        b = min(batch, config.trials - done)
        xi = _noise_integrals(noise, lay, config.periods, b, rng)
        for k, (g, us) in enumerate(zip(gains, u_subs)):
            if xi is None:
                v = np.full((b, config.periods), noiseless[k])
            else:
                v = g * _correlate(r_det, xi, us, lay, config.slot_mode, s.dwells)
            per_period[k].append(v)
        done += b
    out = []
    for k in range(len(refs)):
        pv = np.concatenate(per_period[k], axis=0)
        est = _combine(pv, config, s.period)
        if config.trials > 1:
            var = float(np.var(est, ddof=1))
        elif config.periods > 1 and config.filter == "boxcar":
            var = float(np.var(pv[0], ddof=1)) / config.periods
        else:
            var = 0.0
        out.append(MeasurementResult(
            estimate=float(np.mean(est)), trial_estimates=est, period_values=pv,
            sample_variance=var, noiseless=float(noiseless[k]),
            metadata=dict(periods=config.periods, trials=config.trials, seed=config.seed,
                          E_c=E_c, slot_mode=config.slot_mode, gain=config.gain,
                          sample_rate=lay.sample_rate, n_samples=int(n))))
    return out


def _rng(config: MeasurementConfig, noise: Optional[NoiseModel], rng=None):
    if rng is not None:
        return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    seed = config.seed if config.seed is not None else (noise.seed if noise is not None else None)
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# public operations

def measure(dut, schedule: StimulusSchedule, reference: ReferenceWaveform,
            noise: Optional[NoiseModel] = None, config: MeasurementConfig = MeasurementConfig(),
            E_c: Optional[float] = None, rng=None) -> MeasurementResult:
    """Simulated correlation measurement at control level ``E_c``.

    ``E_c`` defaults to the schedule center.  All levels are checked against
    the device domain before any simulation.
    """
    if reference.values.size != schedule.n_slots:
        raise AlignmentError("reference is not aligned with the schedule slots")
    E_c = schedule.center if E_c is None else float(E_c)
    _stimulus_check(dut, schedule, E_c)
    return _run(dut, schedule, [reference], noise, config, E_c, _rng(config, noise, rng))[0]


def measure_dual(dut, dual: DualChannelSchedule, noise: Optional[NoiseModel] = None,
                 config: MeasurementConfig = MeasurementConfig(), E_c: Optional[float] = None,
                 rng=None):
    """Correlate one response record with both channel references.

    Returns ``(result_c, result_d)``; both share every noise sample.
    """
    s = dual.schedule
    E_c = s.center if E_c is None else float(E_c)
    _stimulus_check(dut, s, E_c)
    return tuple(_run(dut, s, [dual.reference_c, dual.reference_d], noise, config, E_c,
                      _rng(config, noise, rng)))


def aliasing_limit(dut: Characteristic1D, T: float) -> float:
    """Largest control sweep rate ``pi / (T omega_B)`` free of aliasing."""
    return math.pi / (T * dut.omega_B())


def sweep(dut, schedule: StimulusSchedule, reference: ReferenceWaveform, noise: Optional[NoiseModel],
          config: MeasurementConfig, control: ControlSweep) -> SweepResult:
    """Measure at each control waypoint, the weighting shifted along with it.

    The sweep rate is checked against the aliasing limit first.  Waypoints
    run on independent seeded streams (``CORRSYNTH_THREADS`` workers), so
    results do not depend on the thread count.
    """
    T = schedule.period
    E = np.asarray(control.waypoints)
    limit = aliasing_limit(dut, T)
    if control.sweep_rate is not None:
        rate = abs(control.sweep_rate)
    elif E.size > 1:
        rate = float(np.max(np.abs(np.diff(E)))) / (config.periods * T)
    else:
        rate = 0.0
    if rate > control.margin * limit * (1 + 1e-12):
        raise AliasingError(rate, control.margin * limit)
    for e in E:
        _stimulus_check(dut, schedule, e)
    seed = config.seed if config.seed is not None else (noise.seed if noise is not None else None)
    children = np.random.SeedSequence(seed).spawn(E.size)

    def one(k):
        return measure(dut, schedule, reference, noise, config, E_c=E[k],
                       rng=np.random.default_rng(children[k]))

    workers = min(_threads(), E.size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, range(E.size)))
    else:
        results = [one(k) for k in range(E.size)]
    return SweepResult(E, np.array([r.estimate for r in results]),
                       np.array([r.sample_variance for r in results]), rate, limit, results)


def slot_integrate(response, schedule: StimulusSchedule, sample_rate: float) -> np.ndarray:
    """Per-slot means of a uniformly sampled one-period response record.

    Every slot boundary must fall on a sample boundary.
    """
    r = np.asarray(response, dtype=float)
    n = r.shape[-1]
    if abs(n - schedule.period * sample_rate) > 1e-6:
        raise AlignmentError(f"record of {n} samples does not span one period at {sample_rate:g} Hz")
    edges = np.concatenate([[0.0], np.cumsum(schedule.dwells)]) * sample_rate
    idx = np.rint(edges).astype(int)
    if np.any(np.abs(edges - idx) > 1e-6) or np.any(np.diff(idx) <= 0):
        raise AlignmentError("slot boundaries do not coincide with sample boundaries")
    idx[-1] = n
    sums = np.add.reduceat(r, idx[:-1], axis=-1)
    return sums / np.diff(idx)


def reference_stream(schedule: StimulusSchedule, reference: ReferenceWaveform,
                     sample_rate: float) -> np.ndarray:
    """Reference sampled at ``sample_rate`` over one period (sample midpoints)."""
    n = int(round(schedule.period * sample_rate))
    t = (np.arange(n) + 0.5) / sample_rate
    k = np.clip(np.searchsorted(schedule.starts, t, side="right") - 1, 0, schedule.n_slots - 1)
    return reference.values[k]


def self_test(calibrator: Characteristic1D, schedule: StimulusSchedule, reference: ReferenceWaveform,
              config: MeasurementConfig = MeasurementConfig(), weighting=None,
              expected: Optional[float] = None, name: str = "calibrator",
              tolerance: float = 1e-9) -> SelfTestReport:
    """Noiseless run against a known curve compared with its weighted integral.

    ``expected`` defaults to the weighting applied to the calibrator by
    direct evaluation/quadrature.  Deviation is relative to
    ``max(|expected|, peak_scale * Gamma_total)``.
    """
    from .weighting import apply_weighting

    if config.sample_rate is None:
        # noiseless, so resolve each slot finely
        config = config.replace(sample_rate=8.0 / float(np.min(schedule.dwells)))
    res = measure(calibrator, schedule, reference, None, config.replace(trials=1))
    if expected is None:
        if weighting is None:
            raise ValueError("self_test needs a weighting or an expected value")
        expected = apply_weighting(weighting, calibrator)
    gamma = weighting.gamma_total if weighting is not None else reference.calibration
    scale = max(abs(expected), calibrator.peak_scale * gamma)
    dev = abs(res.estimate - expected) / scale
    factor = expected / res.estimate if res.estimate != 0 else float("inf")
    return SelfTestReport(name, float(expected), res.estimate, float(dev), tolerance,
                          bool(dev <= tolerance), float(factor))


# ---------------------------------------------------------------------------
# output

def results_rows(E_c, results: Sequence[MeasurementResult], seed) -> list:
    return [[repr(float(e)), repr(float(r.estimate)), repr(float(r.sample_variance)),
             str(r.metadata.get("periods", 1)), str(seed)] for e, r in zip(E_c, results)]


RESULT_COLUMNS = ["E_c", "estimate", "sample_variance", "n_periods", "seed"]


def result_to_json(result: MeasurementResult) -> str:
    return json.dumps({"estimate": result.estimate, "sample_variance": result.sample_variance,
                       "noiseless": result.noiseless, "metadata": result.metadata}, sort_keys=True)


def measure_2d(dut_map, scan, noise: Optional[NoiseModel] = None,
               config: MeasurementConfig = MeasurementConfig(), offset=(0.0, 0.0), rng=None) -> MeasurementResult:
    """Raster-scan correlation over a 2-D map with white noise per dwell.

    ``offset`` shifts the whole raster (the 2-D control position).
    """
    x = scan.xs + offset[0]
    y = scan.ys + offset[1]
    r = np.asarray(dut_map(x, y), dtype=float)
    tau = scan.dwells
    u = scan.reference.values
    g = scan.reference.gain(scan.period) if config.gain == "apply" else 1.0
    det = g * math.fsum(r * u * tau)
    rng = _rng(config, noise, rng)
    if noise is None or noise.is_zero:
        pv = np.full((config.trials, config.periods), det)
    else:
        if noise.kind != "white":
            raise ValueError("2-D scans support white noise only")
        z = rng.standard_normal((config.trials, config.periods, tau.size))
        pv = det + g * (z * np.sqrt(noise.P_n * tau)) @ u
    est = _combine(pv, config, scan.period)
    var = float(np.var(est, ddof=1)) if config.trials > 1 else 0.0
    return MeasurementResult(float(np.mean(est)), est, pv, var, det,
                             dict(periods=config.periods, trials=config.trials, seed=config.seed))
