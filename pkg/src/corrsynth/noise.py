"""Noise generation, transducer transfer, and closed-form estimator variances.

Units: a :class:`NoiseModel` holds a power *density* ``P_n`` [A^2 s].  A white
stream sampled at ``fs`` therefore has per-sample variance ``P_n * fs``, and
the noise power falling in the band of a single-period estimate is
``P_n / T``.

Spectrum convention: ``u(t) = sum_l U(l) exp(j l w0 t)`` over all integers
``l`` with ``U(-l) = conj(U(l))`` and ``w0 = 2 pi / T``.  The variance of one
single-period estimate ``gain * int_0^T xi(t) u(t) dt`` is then
``gain^2 * T * sum_l P(l) |U(l)|^2`` with ``P(l)`` the density at ``l w0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ResolutionError
from .synthesis import ReferenceWaveform, StimulusSchedule


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """White or coloured additive noise.

    ``table`` lists ``(l, density)`` pairs at harmonic indices of the
    fundamental ``1 / period``.  Between entries the density is interpolated
    log-linearly (linearly if an endpoint is zero); outside the table it is
    held constant.
    """

    kind: str = "white"
    P_n: float = 0.0
    table: tuple = ()
    period: float = 1.0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("white", "colored"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.P_n < 0:
            raise ValueError("noise density must be >= 0")
        if self.kind == "colored":
            if not self.table:
                raise ValueError("colored noise needs a nonempty table")
            tab = sorted((float(l), float(p)) for l, p in self.table)
            if any(p < 0 for _, p in tab):
                raise ValueError("tabulated noise densities must be >= 0")
            if len({l for l, _ in tab}) != len(tab):
                raise ValueError("duplicate harmonic index in noise table")
            object.__setattr__(self, "table", tuple(tab))
        if not self.period > 0:
            raise ValueError("noise reference period must be positive")

    @property
    def is_zero(self) -> bool:
        if self.kind == "white":
            return self.P_n == 0
        return all(p == 0 for _, p in self.table)

    def density_at_harmonic(self, l) -> np.ndarray:
        """Density [A^2 s] at harmonic index ``l`` (may be fractional)."""
        l = np.abs(np.asarray(l, dtype=float))
        if self.kind == "white":
            return np.full(l.shape, self.P_n)
        ls = np.array([x for x, _ in self.table])
        ps = np.array([p for _, p in self.table])
        if ls.size == 1:
            return np.full(l.shape, ps[0])
        k = np.clip(np.searchsorted(ls, l, side="right") - 1, 0, ls.size - 2)
        x0, x1 = ls[k], ls[k + 1]
        p0, p1 = ps[k], ps[k + 1]
        frac = np.clip((l - x0) / (x1 - x0), 0.0, 1.0)
        pos = (p0 > 0) & (p1 > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            logi = np.exp(np.log(np.where(pos, p0, 1.0)) * (1 - frac)
                          + np.log(np.where(pos, p1, 1.0)) * frac)
        return np.where(pos, logi, p0 + (p1 - p0) * frac)

    def density(self, f) -> np.ndarray:
        """Density at frequency ``f`` [Hz]."""
        return self.density_at_harmonic(np.asarray(f, dtype=float) * self.period)

    def band_power(self, T: float, harmonic: float = 0.0) -> float:
        """Noise power in the band of one period-``T`` estimate, ``P / T``."""
        return float(self.density(harmonic / T)) / T

    def minimum(self):
        """``(l, density)`` of the lowest tabulated density."""
        if self.kind == "white":
            return 1.0, self.P_n
        return min(self.table, key=lambda e: e[1])

    def to_dict(self):
        d = {"kind": self.kind, "period": self.period, "seed": self.seed}
        if self.kind == "white":
            d["P_n"] = self.P_n
        else:
            d["table"] = [{"l": l, "P": p} for l, p in self.table]
        return d


@dataclass(frozen=True, eq=False)
class TransducerTransfer:
    """Complex gain ``S(omega)`` of the output transducer."""

    S: Callable[[np.ndarray], np.ndarray]

    def __call__(self, omega):
        return np.asarray(self.S(np.asarray(omega, dtype=float)), dtype=complex)

    def at_harmonics(self, n, omega0: float) -> np.ndarray:
        return self(np.asarray(n, dtype=float) * omega0)

    @classmethod
    def unity(cls):
        return cls(lambda w: np.ones_like(w, dtype=complex))

    @classmethod
    def first_order_lowpass(cls, omega_c: float):
        return cls(lambda w: 1.0 / (1.0 + 1j * w / omega_c))


@dataclass
class VariancePrediction:
    D_n: float
    formula: str
    inputs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.D_n < 0:
            raise ValueError("variance prediction must be >= 0")


# ---------------------------------------------------------------------------
# generation

def generate_noise(noise: NoiseModel, duration: float, sample_rate: float,
                   seed=None, trials: Optional[int] = None) -> np.ndarray:
    """Sampled noise stream, shape ``(n,)`` or ``(trials, n)``.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``; ``None``
    falls back to ``noise.seed``.  Coloured noise is white noise shaped in the
    frequency domain over the whole stream.
    """
    if not (duration > 0 and sample_rate > 0):
        raise ValueError("duration and sample_rate must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        noise.seed if seed is None else seed)
    n = int(round(duration * sample_rate))
    shape = (n,) if trials is None else (trials, n)
    if noise.is_zero:
        return np.zeros(shape)
    z = rng.standard_normal(shape)
    if noise.kind == "white":
        return z * math.sqrt(noise.P_n * sample_rate)
    spec = np.fft.rfft(z, axis=-1)
    f = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    spec *= np.sqrt(noise.density(f) * sample_rate)
    return np.fft.irfft(spec, n=n, axis=-1)


def _harmonic_gains(S: TransducerTransfer, n: int, sample_rate: float) -> np.ndarray:
    f = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    g = S(2 * np.pi * f)
    g[0] = g[0].real
    if n % 2 == 0:
        g[-1] = g[-1].real
    return g


def apply_transducer(stream, S: TransducerTransfer, sample_rate: float,
                     period: Optional[float] = None) -> np.ndarray:
    """Multiply each harmonic of ``stream`` by ``S`` at its frequency."""
    x = np.asarray(stream, dtype=float)
    n = x.shape[-1]
    if period is not None:
        periods = n / (period * sample_rate)
        if abs(periods - round(periods)) > 1e-9 * max(1.0, periods):
            raise ValueError("stream must span a whole number of periods")
    return np.fft.irfft(np.fft.rfft(x, axis=-1) * _harmonic_gains(S, n, sample_rate), n=n, axis=-1)


def equivalent_reference(u_samples, S: TransducerTransfer, sample_rate: float) -> np.ndarray:
    """Reference with the transducer folded in.

    Correlating the raw response with this waveform gives the same number as
    correlating the transduced response with ``u_samples``.  Its harmonic
    amplitudes are ``conj(S) * U``, which is ``S * U`` for a real gain.
    """
    u = np.asarray(u_samples, dtype=float)
    n = u.shape[-1]
    return np.fft.irfft(np.fft.rfft(u, axis=-1) * np.conj(_harmonic_gains(S, n, sample_rate)),
                        n=n, axis=-1)


def reference_spectrum(s: StimulusSchedule, u: ReferenceWaveform, L: int) -> np.ndarray:
    """Complex amplitudes ``U(l)``, ``l = 0..L``, of the stepwise reference.

    Evaluated in closed form from the slot edges, no sampling.
    """
    T = s.period
    edges = np.concatenate([[0.0], np.cumsum(s.dwells)])
    edges[-1] = T
    l = np.arange(1, L + 1)
    w0 = 2 * np.pi / T
    U = np.empty(L + 1, dtype=complex)
    U[0] = math.fsum(u.values * s.dwells) / T
    out = np.zeros(L, dtype=complex)
    block = 512
    for a in range(0, L, block):
        lb = l[a:a + block, None]
        ph = np.exp(-1j * w0 * lb * edges[None, :])
        out[a:a + block] = (ph[:, :-1] - ph[:, 1:]) @ u.values / (1j * w0 * lb[:, 0] * T)
    U[1:] = out
    return U


# ---------------------------------------------------------------------------
# predictions

def time_domain_variance(s: StimulusSchedule, u: ReferenceWaveform, P_n: float,
                         apply_gain: bool = True) -> float:
    """White-noise variance of one single-period estimate, ``gain^2 P int u^2``."""
    g = u.gain(s.period) if apply_gain else 1.0
    return g * g * P_n * math.fsum(u.values ** 2 * s.dwells)


def predict_variance_spectral(s: StimulusSchedule, u: ReferenceWaveform, noise: NoiseModel,
                              L: Optional[int] = None, sample_rate: Optional[float] = None,
                              apply_gain: bool = True, tail_limit: float = 1e-3) -> VariancePrediction:
    """Variance of one single-period estimate from the reference spectrum.

    Sums ``P(l) |U(l)|^2`` over ``|l| <= L`` (both signs).  The energy beyond
    ``L`` is known exactly from Parseval; it is weighted by the density held
    constant past ``L``, which is exact once ``L`` is past the noise table.
    If the table extends past ``L`` the tail can only be bounded, and the
    bound must stay below ``tail_limit`` of the partial sum.
    """
    T = s.period
    if L is None:
        L = int(sample_rate * T / 2) if sample_rate else 4096
    L = max(int(L), 1)
    U = reference_spectrum(s, u, L)
    ratio = T / noise.period
    dens = noise.density_at_harmonic(np.arange(L + 1) * ratio)
    power = np.abs(U) ** 2
    partial = dens[0] * power[0] + 2.0 * math.fsum(dens[1:] * power[1:])
    energy = math.fsum(u.values ** 2 * s.dwells) / T
    tail_energy = max(energy - power[0] - 2.0 * math.fsum(power[1:]), 0.0)
    tail_density = float(noise.density_at_harmonic((L + 1) * ratio))
    table_end = 0.0 if noise.kind == "white" else noise.table[-1][0]
    exact_tail = table_end <= (L + 1) * ratio
    if exact_tail:
        tail = tail_energy * tail_density
    else:
        beyond = [p for l, p in noise.table if l > (L + 1) * ratio] + [tail_density]
        tail = tail_energy * max(beyond)
        if partial > 0 and tail > tail_limit * partial:
            raise ResolutionError(
                f"spectral tail bound {tail / partial:.2e} of the partial sum exceeds {tail_limit}"
                f" at L={L}; raise the harmonic cutoff")
    g = u.gain(T) if apply_gain else 1.0
    D = g * g * T * (partial + tail)
    return VariancePrediction(float(D), "spectral", dict(L=L, tail=float(g * g * T * tail),
                                                   exact_tail=exact_tail, period=T))


def _gamma(w) -> float:
    if hasattr(w, "gamma_total"):
        return w.gamma_total
    return math.fsum(np.abs(np.asarray(w, dtype=float)).ravel())


def predict_variance_optimum(w, P_n: float) -> VariancePrediction:
    """``P_n * Gamma_total^2`` with ``P_n`` the in-band noise power.

    ``w`` is a weighting or a plain array of node weights.
    """
    gamma = _gamma(w)
    return VariancePrediction(P_n * gamma ** 2, "optimum", dict(P_n=P_n, gamma_total=gamma))


def predict_variance_narrowband(w, P_n_at_min: float) -> VariancePrediction:
    """Optimum variance times ``pi^2 / 8`` for a harmonic reference."""
    opt = predict_variance_optimum(w, P_n_at_min)
    return VariancePrediction(opt.D_n * np.pi ** 2 / 8, "narrowband",
                              dict(P_n=P_n_at_min, gamma_total=opt.inputs["gamma_total"]))
