"""Synthetic devices under test.

A device maps a stimulus level ``E`` (volts or eV, a single "stimulus scale")
to a deterministic current ``I_c(E) + I_b(E)``: an informative curve riding
on a background.  Random noise is added by :mod:`corrsynth.noise`, never here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator

from .errors import DomainError

Curve = Callable[[np.ndarray], np.ndarray]

_DOMAIN_SLACK = 1e-12


def _zero(E):
    return np.zeros_like(np.asarray(E, dtype=float))


@dataclass(frozen=True, eq=False)
class Characteristic1D:
    """Current-versus-stimulus characteristic ``I(E) = I_c(E) + I_b(E)``.

    ``derivative`` is optional and only used by oracles (analytic ``dI_c/dE``).
    ``bandwidth_omega_B`` may be left as ``None``; :func:`estimate_bandwidth`
    then supplies it on demand through :meth:`omega_B`.
    """

    informative_curve: Curve
    background_curve: Curve
    domain: tuple[float, float]
    bandwidth_omega_B: Optional[float] = None
    derivative: Optional[Curve] = None
    peak_scale: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.domain
        if not hi > lo:
            raise ValueError(f"domain must be increasing, got {self.domain}")
        if self.bandwidth_omega_B is not None and not self.bandwidth_omega_B > 0:
            raise ValueError("bandwidth_omega_B must be positive")
        probe = np.linspace(lo, hi, 257)
        if not (np.all(np.isfinite(self.informative_curve(probe)))
                and np.all(np.isfinite(self.background_curve(probe)))):
            raise ValueError("characteristic is not finite on its domain")

    def contains(self, E) -> bool:
        E = np.asarray(E, dtype=float)
        lo, hi = self.domain
        tol = _DOMAIN_SLACK * max(1.0, abs(lo), abs(hi))
        return bool(np.all((E >= lo - tol) & (E <= hi + tol)))

    def __call__(self, E):
        return sample_response(self, E)

    def omega_B(self) -> float:
        if self.bandwidth_omega_B is not None:
            return self.bandwidth_omega_B
        return estimate_bandwidth(self)


@dataclass(frozen=True, eq=False)
class CharacteristicMap2D:
    """Spatial map ``I(x, y) = I_c(x, y) + I_b(x, y)`` over a rectangle."""

    informative_map: Callable[[np.ndarray, np.ndarray], np.ndarray]
    background_map: Callable[[np.ndarray, np.ndarray], np.ndarray]
    domain: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        (x0, x1), (y0, y1) = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ValueError("map domain must be a non-degenerate rectangle")
        X, Y = np.meshgrid(np.linspace(x0, x1, 33), np.linspace(y0, y1, 33))
        if not (np.all(np.isfinite(self.informative_map(X, Y)))
                and np.all(np.isfinite(self.background_map(X, Y)))):
            raise ValueError("map is not finite on its domain")

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        (x0, x1), (y0, y1) = self.domain
        if np.any((x < x0) | (x > x1) | (y < y0) | (y > y1)):
            raise DomainError("scan position outside map domain")
        return self.informative_map(x, y) + self.background_map(x, y)


@dataclass(frozen=True, eq=False)
class DynamicDut:
    """Device whose current depends on the stimulus and its time derivative."""

    response: Callable[[np.ndarray, np.ndarray], np.ndarray]
    domain: tuple[tuple[float, float], tuple[float, float]]

    def __call__(self, E, E_rate):
        E = np.asarray(E, dtype=float)
        E_rate = np.asarray(E_rate, dtype=float)
        (e0, e1), (r0, r1) = self.domain
        tol = _DOMAIN_SLACK * max(1.0, abs(e0), abs(e1), abs(r0), abs(r1))
        if np.any((E < e0 - tol) | (E > e1 + tol) | (E_rate < r0 - tol) | (E_rate > r1 + tol)):
            raise DomainError("stimulus (E, dE/dt) outside dynamic DUT area")
        return self.response(E, E_rate)

    def contains(self, E) -> bool:
        (e0, e1), _ = self.domain
        E = np.asarray(E, dtype=float)
        return bool(np.all((E >= e0) & (E <= e1)))


# ---------------------------------------------------------------------------
# builders

def polynomial(coeffs: Sequence[float]) -> Curve:
    """Polynomial in ``E`` with ascending coefficients ``c0 + c1 E + ...``."""
    c = np.asarray(coeffs, dtype=float)
    if c.size == 0:
        return _zero
    return lambda E: np.polynomial.polynomial.polyval(np.asarray(E, dtype=float), c)


def auger_spectrum(center: float, width: float, amplitude: float,
                   shape: str = "gaussian", background: Sequence[float] = (),
                   domain: Optional[tuple[float, float]] = None,
                   bandwidth_omega_B: Optional[float] = None) -> Characteristic1D:
    """Auger peak on a secondary-electron background.

    ``width`` is the Gaussian standard deviation or the Lorentzian half width
    at half maximum.  ``background`` holds ascending polynomial coefficients,
    degree at most 3.
    """
    if not width > 0:
        raise ValueError("peak width must be positive")
    if len(background) > 4:
        raise ValueError("background polynomial degree must be <= 3")
    if domain is None:
        domain = (center - 8 * width, center + 8 * width)
    if not (domain[0] <= center - 3 * width and center + 3 * width <= domain[1]):
        raise ValueError("peak +-3 widths must lie inside the domain")

    if shape == "gaussian":
        def informative(E):
            z = (np.asarray(E, dtype=float) - center) / width
            return amplitude * np.exp(-0.5 * z * z)

        def derivative(E):
            z = (np.asarray(E, dtype=float) - center) / width
            return -amplitude * z / width * np.exp(-0.5 * z * z)
    elif shape == "lorentzian":
        def informative(E):
            z = (np.asarray(E, dtype=float) - center) / width
            return amplitude / (1.0 + z * z)

        def derivative(E):
            z = (np.asarray(E, dtype=float) - center) / width
            return -2.0 * amplitude * z / width / (1.0 + z * z) ** 2
    else:
        raise ValueError(f"unknown peak shape {shape!r}")

    return Characteristic1D(
        informative_curve=informative,
        background_curve=polynomial(background),
        domain=(float(domain[0]), float(domain[1])),
        bandwidth_omega_B=bandwidth_omega_B,
        derivative=derivative,
        peak_scale=abs(amplitude) if amplitude else 1.0,
        params=dict(kind="auger", center=center, width=width, amplitude=amplitude,
                    shape=shape, background=list(map(float, background))),
    )


def nano_iv(ohmic_conductance: float, nonlinear_term: Optional[Curve] = None,
            domain: tuple[float, float] = (-1.0, 1.0), max_ratio: float = 0.1,
            bandwidth_omega_B: Optional[float] = None) -> Characteristic1D:
    """Nano-device I-V curve: Ohm's-law line plus a small nonlinear deviation.

    The deviation is the informative part; the ohmic line is background.
    """
    g = float(ohmic_conductance)
    nonlinear = nonlinear_term or _zero
    E = np.linspace(domain[0], domain[1], 513)
    ohmic_max = np.max(np.abs(g * E))
    nl_max = np.max(np.abs(nonlinear(E)))
    if nl_max > max_ratio * ohmic_max:
        raise ValueError(
            f"nonlinear term {nl_max:.3g} exceeds {max_ratio} x ohmic term {ohmic_max:.3g}")
    return Characteristic1D(
        informative_curve=nonlinear,
        background_curve=lambda E: g * np.asarray(E, dtype=float),
        domain=(float(domain[0]), float(domain[1])),
        bandwidth_omega_B=bandwidth_omega_B,
        peak_scale=ohmic_max if ohmic_max else 1.0,
        params=dict(kind="ohmic", conductance=g),
    )


def tabulated(E: Sequence[float], current: Sequence[float],
              background: Sequence[float] = (),
              bandwidth_omega_B: Optional[float] = None) -> Characteristic1D:
    """Characteristic from measured data, monotone-cubic interpolated."""
    E = np.asarray(E, dtype=float)
    I = np.asarray(current, dtype=float)
    interp = PchipInterpolator(E, I, extrapolate=False)
    return Characteristic1D(
        informative_curve=lambda x: interp(np.asarray(x, dtype=float)),
        background_curve=polynomial(background),
        domain=(float(E[0]), float(E[-1])),
        bandwidth_omega_B=bandwidth_omega_B,
        derivative=interp.derivative(),
        peak_scale=float(np.max(np.abs(I))) or 1.0,
        params=dict(kind="table"),
    )


def scaled(dut: Characteristic1D, a: float) -> Characteristic1D:
    """Device whose whole response is multiplied by ``a``."""
    deriv = None if dut.derivative is None else (lambda E: a * dut.derivative(E))
    return Characteristic1D(
        informative_curve=lambda E: a * dut.informative_curve(E),
        background_curve=lambda E: a * dut.background_curve(E),
        domain=dut.domain, bandwidth_omega_B=dut.bandwidth_omega_B,
        derivative=deriv, peak_scale=abs(a) * dut.peak_scale, params=dict(dut.params),
    )


# ---------------------------------------------------------------------------
# operations

def sample_response(dut: Characteristic1D, stimulus_level):
    """Deterministic response ``I_c(E) + I_b(E)``; raises outside the domain."""
    E = np.asarray(stimulus_level, dtype=float)
    if not dut.contains(E):
        raise DomainError(f"stimulus outside device domain {dut.domain}")
    lo, hi = dut.domain
    E = np.clip(E, lo, hi)
    out = dut.informative_curve(E) + dut.background_curve(E)
    return float(out) if out.ndim == 0 else out


def full_auger_current(dut: Characteristic1D, E_l: float, E_h: float) -> float:
    """Integral of the informative curve alone over ``[E_l, E_h]``."""
    if not E_l < E_h:
        raise ValueError(f"integration bounds inverted: E_l={E_l} >= E_h={E_h}")
    if not dut.contains([E_l, E_h]):
        raise DomainError("integration bounds outside device domain")
    f = lambda E: float(dut.informative_curve(np.asarray(E)))
    points = None
    center = dut.params.get("center")
    if center is not None and E_l < center < E_h:
        points = [center]
    value, _ = integrate.quad(f, E_l, E_h, epsabs=1e-14 * dut.peak_scale,
                              epsrel=1e-13, limit=500, points=points)
    return value


def estimate_bandwidth(dut: Characteristic1D, grid_points: int = 4096,
                       threshold: float = 0.999) -> float:
    """Upper cut-off frequency ``omega_B`` [rad per stimulus unit] of ``I(E)``.

    The curve is sampled on a uniform grid; the straight line through the two
    end samples is removed so the finite window does not leak a sawtooth into
    the spectrum.  Returns the smallest frequency whose cumulative spectral
    energy reaches ``threshold`` of the total, never below the lowest
    resolvable bin.
    """
    if grid_points < 64:
        raise ValueError("grid_points must be >= 64")
    lo, hi = dut.domain
    E = np.linspace(lo, hi, grid_points)
    y = dut.informative_curve(E) + dut.background_curve(E)
    y = y - (y[0] + (y[-1] - y[0]) * (E - lo) / (hi - lo))
    power = np.abs(np.fft.rfft(y)) ** 2
    step = E[1] - E[0]
    omega = 2 * np.pi * np.fft.rfftfreq(grid_points, d=step)
    total = power.sum()
    if total <= 1e-30 * max(1.0, dut.peak_scale) ** 2 * grid_points:
        return float(omega[1])
    cum = np.cumsum(power) / total
    k = int(np.searchsorted(cum, threshold))
    return float(omega[max(k, 1)])
