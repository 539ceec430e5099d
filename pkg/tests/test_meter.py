import math

import numpy as np
import pytest

from corrsynth import dut as D
from corrsynth import meter as M
from corrsynth import synthesis as S
from corrsynth import weighting as W
from corrsynth.errors import AliasingError, AlignmentError, DomainError
from corrsynth.noise import NoiseModel


def _derivative(E_c=0.0, h=0.1):
    w = W.derivative_stencil(E_c, h)
    s, u = S.synthesize_discrete(w, 1.0)
    return w, s, u


def test_noiseless_slope_of_ohmic_line():
    _, s, u = _derivative()
    res = M.measure(D.nano_iv(2.5), s, u, None, M.MeasurementConfig())
    assert res.estimate == pytest.approx(2.5, rel=1e-13)
    assert res.sample_variance == 0.0


def test_noiseless_matches_weighted_sum():
    w = W.moment_design([-1.0, -0.4, 0.3, 1.1], 1)
    s, u = S.synthesize_discrete(w, 0.3, order="randomized", seed=2)
    d = D.auger_spectrum(0.0, 0.5, 1.0, background=(0.2, 0.1), domain=(-5.0, 5.0))
    res = M.measure(d, s, u)
    assert res.estimate == pytest.approx(W.apply_weighting(w, d), rel=1e-12)


def test_raw_gain_differs_by_gain_factor():
    _, s, u = _derivative()
    dut = D.nano_iv(1.0)
    a = M.measure(dut, s, u, config=M.MeasurementConfig(gain="apply")).estimate
    b = M.measure(dut, s, u, config=M.MeasurementConfig(gain="raw")).estimate
    assert a == pytest.approx(b * u.gain(s.period), rel=1e-13)


def test_slot_mode_equals_full_rate():
    w = W.DiscreteWeighting([-1, 0, 1], [1, -2, 1])
    s, u = S.synthesize_discrete(w, 1.0)
    nm = NoiseModel("white", 1.0)
    cfg = M.MeasurementConfig(trials=50, seed=9, sample_rate=64.0)
    d = D.auger_spectrum(0.0, 1.0, 1.0)
    a = M.measure(d, s, u, nm, cfg)
    b = M.measure(d, s, u, nm, cfg.replace(slot_mode=True))
    assert np.allclose(a.trial_estimates, b.trial_estimates, rtol=0, atol=1e-12)


def test_alignment_error():
    _, s, u = _derivative()
    with pytest.raises(AlignmentError):
        M.measure(D.nano_iv(1.0), s, u.with_values([1.0, -1.0, 1.0]))


def test_domain_checked_before_simulation():
    _, s, u = _derivative(0.0, 0.5)
    with pytest.raises(DomainError):
        M.measure(D.nano_iv(1.0, domain=(-0.2, 0.2)), s, u)


def test_sample_rate_too_low():
    _, s, u = _derivative()
    with pytest.raises(ValueError):
        M.measure(D.nano_iv(1.0), s, u, config=M.MeasurementConfig(sample_rate=1.0))


def test_white_noise_variance_small_run():
    w = W.DiscreteWeighting([-1, 0, 1], [1, -2, 1])
    s, u = S.synthesize_discrete(w, 2.0)
    nm = NoiseModel("white", 1.0)
    res = M.measure(D.nano_iv(0.0), s, u, nm, M.MeasurementConfig(trials=4000, seed=3))
    expected = 16.0 / 2.0
    # 4000 samples: relative sd of the variance is about 2.2%
    assert res.sample_variance == pytest.approx(expected, rel=0.1)
    assert abs(res.estimate) < 5 * math.sqrt(expected / 4000)


def test_periods_average_down():
    w = W.DiscreteWeighting([-1, 0, 1], [1, -2, 1])
    s, u = S.synthesize_discrete(w, 1.0)
    nm = NoiseModel("white", 1.0)
    res = M.measure(D.nano_iv(0.0), s, u, nm, M.MeasurementConfig(periods=8, trials=3000, seed=4))
    assert res.sample_variance == pytest.approx(16.0 / 8, rel=0.1)


def test_lowpass_filter_steady_state():
    _, s, u = _derivative()
    cfg = M.MeasurementConfig(periods=5, filter="lowpass", cutoff=0.3)
    res = M.measure(D.nano_iv(3.0), s, u, None, cfg)
    assert res.estimate == pytest.approx(3.0, rel=1e-12)


def test_determinism_and_thread_independence(monkeypatch):
    w, s, u = _derivative(0.0, 0.2)
    d = D.auger_spectrum(0.0, 1.0, 1.0)
    nm = NoiseModel("white", 1e-3)
    cfg = M.MeasurementConfig(trials=20, seed=11)
    ctl = M.ControlSweep.uniform(-2, 2, 9, margin=1.0)
    monkeypatch.setenv("CORRSYNTH_THREADS", "1")
    a = M.sweep(d, s, u, nm, cfg, ctl)
    monkeypatch.setenv("CORRSYNTH_THREADS", "4")
    b = M.sweep(d, s, u, nm, cfg, ctl)
    assert np.array_equal(a.estimates, b.estimates)
    assert not np.array_equal(a.estimates, M.sweep(d, s, u, nm, cfg.replace(seed=12), ctl).estimates)


def test_aliasing_guard():
    _, s, u = _derivative(0.0, 0.1)
    d = D.auger_spectrum(0.0, 1.0, 1.0)
    limit = M.aliasing_limit(d, s.period)
    step = 2.0 * limit * s.period
    ctl = M.ControlSweep(tuple(np.arange(5) * step - 2 * step))
    with pytest.raises(AliasingError) as err:
        M.sweep(d, s, u, None, M.MeasurementConfig(), ctl)
    assert err.value.limit == pytest.approx(limit)


def test_slot_integrate():
    s = S.StimulusSchedule.from_dwells([0.0, 1.0], [0.25, 0.75])
    r = np.concatenate([np.full(2, 1.0), np.full(6, 3.0)])
    assert np.allclose(M.slot_integrate(r, s, 8.0), [1.0, 3.0])
    with pytest.raises(AlignmentError):
        M.slot_integrate(np.zeros(10), s, 10.0)


def test_self_test_pass_and_raw_fail():
    w = W.DiscreteWeighting([-1, 0, 1], [0.5, -1, 0.5])
    s, u = S.synthesize_discrete(w, 1.0)
    curve = D.Characteristic1D(lambda E: np.asarray(E) ** 2, D.polynomial([1.0, 0.5]), (-2.0, 2.0))
    ok = M.self_test(curve, s, u, weighting=w)
    assert ok.passed and ok.deviation < 1e-12
    assert ok.expected == pytest.approx(1.0)
    bad = M.self_test(curve, s, u, M.MeasurementConfig(gain="raw"), weighting=w)
    assert not bad.passed
    assert bad.factor == pytest.approx(u.gain(s.period))


def test_measure_2d_noiseless():
    w = W.Weighting2D([0.0, 1.0], [0.0, 1.0, 2.0], [[1, -2, 1], [-1, 2, -1]])
    scan = S.synthesize_2d(w, 1.0)
    f = lambda x, y: x * y ** 2 + 3.0
    res = M.measure_2d(f, scan)
    X, Y = np.meshgrid(w.xs, w.ys, indexing="ij")
    assert res.estimate == pytest.approx(np.sum(w.weights * f(X, Y)), abs=1e-12)


def test_measure_2d_white_variance():
    w = W.Weighting2D([0.0, 1.0], [0.0, 1.0], [[1, -1], [-1, 1]])
    scan = S.synthesize_2d(w, 1.0)
    res = M.measure_2d(lambda x, y: 0 * x, scan, NoiseModel("white", 1.0), M.MeasurementConfig(trials=4000, seed=1))
    assert res.sample_variance == pytest.approx(16.0, rel=0.1)


def test_results_rows_repr():
    _, s, u = _derivative()
    res = M.measure(D.nano_iv(1.0), s, u)
    rows = M.results_rows([0.0], [res], 7)
    assert rows[0][0] == "0.0" and rows[0][-1] == "7"
    assert len(rows[0]) == len(M.RESULT_COLUMNS)
