import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.signal import freqz

from corrsynth import weighting as W
from corrsynth.errors import DesignError


def test_boxcar_masses():
    w = W.boxcar_with_end_deltas(1.0, 3.0)
    assert w.deltas == ((1.0, -1.0), (3.0, -1.0))
    assert w.gamma_total == pytest.approx(4.0)


def test_boxcar_rejects_constant_and_linear():
    w = W.boxcar_with_end_deltas(-0.5, 2.0)
    assert abs(W.background_residual(w, lambda E: np.ones_like(E))) < 1e-12
    assert abs(W.background_residual(w, lambda E: E)) < 1e-12


def test_boxcar_quadratic_residual():
    # exact: (b^3 - a^3)/3 - (b - a)(a^2 + b^2)/2 = -(b - a)^3 / 6
    a, b = 0.5, 2.0
    w = W.boxcar_with_end_deltas(a, b)
    assert W.background_residual(w, lambda E: E ** 2) == pytest.approx(-(b - a) ** 3 / 6, rel=1e-12)


def test_boxcar_inverted():
    with pytest.raises(ValueError):
        W.boxcar_with_end_deltas(2.0, 1.0)


def test_delta_minus_comb_single():
    w = W.delta_minus_comb(0.0, [1.0], [1.0])
    assert np.array_equal(w.weights, [1.0, -1.0])
    assert W.background_residual(w, lambda E: 7.0 + 0 * E) == 0.0


def test_delta_minus_comb_symmetric_pair_kills_affine():
    w = W.delta_minus_comb(2.0, [1.5, 2.5], [0.5, 0.5])
    assert np.sum(w.weights) == 0
    assert np.sum(w.weights * w.nodes) == pytest.approx(0, abs=1e-15)


def test_delta_minus_comb_errors():
    with pytest.raises(ValueError):
        W.delta_minus_comb(0.0, [1.0, 1.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        W.delta_minus_comb(0.0, [0.0, 1.0], [0.5, 0.5])


def test_dolph_chebyshev_equiripple():
    at = 60.0
    for n in (4, 5, 8):
        a = W.dolph_chebyshev_coefficients(n, at)
        assert a.sum() == pytest.approx(1.0)
        _, h = freqz(a, worN=8192)
        mag = np.abs(h) / np.abs(h[0])
        # sidelobe region: past the first null
        dips = np.flatnonzero((mag[1:-1] < mag[:-2]) & (mag[1:-1] < mag[2:])) + 1
        side = mag[dips[0]:]
        peaks = side[1:-1][(side[1:-1] > side[:-2]) & (side[1:-1] > side[2:])]
        if n > 3:
            assert peaks.size >= 1
            assert np.allclose(peaks, 10 ** (-at / 20), rtol=2e-2)


def test_chebyshev_comb_rejects_affine():
    w = W.chebyshev_comb(1.0, 0.3, 4)
    assert w.nodes.size == 5
    assert abs(W.background_residual(w, lambda E: 3 - 2 * E)) < 1e-14


# minimum-norm solutions computed in exact rational arithmetic
@pytest.mark.parametrize("nodes,d,expected", [
    ([-1, 0, 1], 1, [0.5, -1.0, 0.5]),
    ([-1, 1], 0, [-0.5, 0.5]),
    ([-2, -1, 0, 1, 2], 1, [1 / 7, -1 / 14, -1 / 7, -1 / 14, 1 / 7]),
    ([-2, -1, 0, 1, 2], 2, [-1 / 12, 1 / 6, 0.0, -1 / 6, 1 / 12]),
    ([0, 0.5, 1.5, 2, 3], 1, [0.22510822510822512, -0.04329004329004329, -0.2510822510822511,
                              -0.19047619047619047, 0.2597402597402597]),
])
def test_moment_design_oracle(nodes, d, expected):
    w = W.moment_design(nodes, d)
    assert np.allclose(w.weights, expected, rtol=1e-12, atol=1e-14)


def test_moment_design_underdetermined():
    with pytest.raises(DesignError):
        W.moment_design([0, 1, 2], 2)


@given(st.integers(0, 3), st.data())
def test_moment_design_annihilates_polynomials(d, data):
    n = d + 2 + data.draw(st.integers(0, 4))
    nodes = np.sort(data.draw(st.lists(st.floats(-5, 5), min_size=n, max_size=n, unique=True)))
    if np.min(np.diff(nodes)) < 1e-2:
        return
    w = W.moment_design(nodes, d)
    coeffs = data.draw(st.lists(st.floats(-10, 10), min_size=d + 1, max_size=d + 1))
    poly = lambda E: np.polynomial.polynomial.polyval(E, coeffs)
    res = W.background_residual(w, poly)
    bound = 1e-9 * w.gamma_total * max(np.max(np.abs(poly(nodes))), 1.0)
    assert abs(res) <= bound


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-5, 5), st.floats(0.1, 5))
def test_boxcar_affine_property(a, b, lo, width):
    w = W.boxcar_with_end_deltas(lo, lo + width)
    res = W.background_residual(w, lambda E: a + b * E)
    assert abs(res) <= 1e-9 * max(abs(a) + abs(b) * (abs(lo) + width), 1.0) * width


@given(st.floats(-100, 100))
def test_shift_covariance(delta):
    w = W.moment_design([-1, -0.3, 0.4, 1.2], 1, center=0.1)
    s = w.shifted(delta)
    assert np.array_equal(s.weights, w.weights)
    assert s.center == pytest.approx(w.center + delta)
    assert np.allclose(s.nodes, w.nodes + delta)


def test_derivative_stencil_constant_zero():
    w = W.derivative_stencil(0.3, 0.1)
    assert W.background_residual(w, lambda E: 5.0 + 0 * E) == 0.0
    assert W.background_residual(w, lambda E: 2.0 * E) == pytest.approx(2.0)


def test_richardson_exact_for_quintic_slope():
    w = W.richardson_derivative(0.0, 0.1)
    # central differences at h and 2.5h cancel the cubic term
    assert W.background_residual(w, lambda E: E ** 3) == pytest.approx(0.0, abs=1e-12)
    assert W.background_residual(w, lambda E: E) == pytest.approx(1.0, rel=1e-13)


def test_zero_background():
    for w in (W.boxcar_with_end_deltas(0, 1), W.moment_design([0, 1, 2], 1)):
        assert W.background_residual(w, lambda E: 0 * np.asarray(E)) == 0.0


def test_validation():
    with pytest.raises(DesignError):
        W.DiscreteWeighting([0, 0], [1, 1])
    with pytest.raises(DesignError):
        W.DiscreteWeighting([0, 1], [0, 0])
    with pytest.raises(DesignError):
        W.Weighting2D([0, 1], [0], [[0], [0]])


@pytest.mark.parametrize("w", [
    W.moment_design([-1.1, 0.2, 0.7, 1.9], 1),
    W.boxcar_with_end_deltas(-0.3, 0.9),
    W.ContinuousWeighting(W.TableProfile((0.0, 0.5, 1.0), (1.0, -2.0, 1.0)), (0.0, 1.0), ((0.5, 0.25),)),
    W.ContinuousWeighting(W.PolynomialProfile((0.1, 0.2, 0.3), 0.5), (0.0, 1.0)),
    W.Weighting2D([0, 1], [0, 1, 2], [[1, -1, 0.5], [0.25, 2, -3]]),
])
def test_json_round_trip(w):
    text = W.to_json(w)
    back = W.from_json(text)
    assert W.to_json(back) == text
    assert json.loads(text)["kind"] in ("discrete", "continuous", "grid2d")
