"""Command-line experiment runner.

    corrsynth run <config.toml> [--out DIR] [--seed N] [--trials N]
    corrsynth selftest [--gain raw]
    corrsynth synth <config.toml> --emit schedule.json|waveform.csv
    corrsynth compare <config.toml> [--out DIR] [--seed N] [--trials N]

Every output file starts with a comment line carrying the SHA-256 of the
canonicalized config, so results can be traced back to their inputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import dut as dut_mod
from . import lockin, meter, noise as noise_mod, synthesis, weighting as wmod
from .errors import ConfigError, CorrsynthError

log = logging.getLogger("corrsynth")

MODES = ("discrete", "continuous", "dual", "narrowband", "map2d", "dynamic", "lockin")
NEEDS_WEIGHTING = {"discrete", "continuous", "dual", "narrowband", "map2d", "dynamic"}


# ---------------------------------------------------------------------------
# config parsing

def load_config(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


class _Checker:
    """Collects every config problem before raising once."""

    def __init__(self):
        self.problems = {}

    def add(self, key, msg):
        self.problems.setdefault(key, msg)

    def number(self, sec, section, key, default=None, positive=False, nonneg=False, integer=False,
               required=False):
        full = f"{section}.{key}"
        if key not in sec:
            if required:
                self.add(full, "required")
            return default
        v = sec[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.add(full, "must be a number")
            return default
        if integer and int(v) != v:
            self.add(full, "must be an integer")
            return default
        if positive and not v > 0:
            self.add(full, "must be > 0")
            return default
        if nonneg and v < 0:
            self.add(full, "must be >= 0")
            return default
        return int(v) if integer else float(v)

    def numbers(self, sec, section, key, required=False, min_len=1):
        full = f"{section}.{key}"
        if key not in sec:
            if required:
                self.add(full, "required")
            return None
        v = sec[key]
        if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                              for x in np.ravel(np.asarray(v, dtype=object))):
            self.add(full, "must be a list of numbers")
            return None
        if len(v) < min_len:
            self.add(full, f"needs at least {min_len} entries")
            return None
        return v

    def choice(self, sec, section, key, options, default=None):
        v = sec.get(key, default)
        if v not in options:
            self.add(f"{section}.{key}", f"must be one of {list(options)}")
            return default
        return v

    def attempt(self, key, fn):
        try:
            return fn()
        except (ValueError, TypeError) as exc:
            self.add(key, str(exc))
            return None

    def raise_if_any(self):
        if self.problems:
            raise ConfigError(self.problems)


def _build_dut(sec, chk):
    kind = chk.choice(sec, "dut", "kind", ("auger", "ohmic", "polynomial", "map2d", "dynamic"))
    dom = chk.numbers(sec, "dut", "domain", min_len=2)
    if kind == "auger":
        c = chk.number(sec, "dut", "center", required=True)
        w = chk.number(sec, "dut", "width", required=True, positive=True)
        a = chk.number(sec, "dut", "amplitude", 1.0)
        bg = chk.numbers(sec, "dut", "background") or []
        shape = chk.choice(sec, "dut", "shape", ("gaussian", "lorentzian"), "gaussian")
        omega_b = chk.number(sec, "dut", "bandwidth", positive=True)
        if None in (c, w):
            return None
        return chk.attempt("dut", lambda: dut_mod.auger_spectrum(
            c, w, a, shape, bg, tuple(dom) if dom else None, omega_b))
    if kind == "ohmic":
        g = chk.number(sec, "dut", "conductance", required=True)
        nl = chk.numbers(sec, "dut", "nonlinear") or []
        if g is None:
            return None
        nonlinear = dut_mod.polynomial(nl) if nl else None
        return chk.attempt("dut", lambda: dut_mod.nano_iv(g, nonlinear, tuple(dom) if dom else (-1.0, 1.0)))
    if kind == "polynomial":
        inf = chk.numbers(sec, "dut", "informative", required=True)
        bg = chk.numbers(sec, "dut", "background") or []
        if dom is None:
            chk.add("dut.domain", "required for polynomial devices")
        if inf is None or dom is None:
            return None
        return chk.attempt("dut", lambda: dut_mod.Characteristic1D(
            dut_mod.polynomial(inf), dut_mod.polynomial(bg), tuple(dom),
            bandwidth_omega_B=sec.get("bandwidth")))
    if kind == "map2d":
        # Gaussian blob on a plane background
        cx = chk.number(sec, "dut", "center_x", 0.0)
        cy = chk.number(sec, "dut", "center_y", 0.0)
        w = chk.number(sec, "dut", "width", 1.0, positive=True)
        a = chk.number(sec, "dut", "amplitude", 1.0)
        plane = chk.numbers(sec, "dut", "plane") or [0.0, 0.0, 0.0]
        box = sec.get("domain", [[-10, 10], [-10, 10]])
        if w is None:
            return None
        return chk.attempt("dut", lambda: dut_mod.CharacteristicMap2D(
            lambda x, y: a * np.exp(-0.5 * ((x - cx) ** 2 + (y - cy) ** 2) / w ** 2),
            lambda x, y: plane[0] + plane[1] * x + plane[2] * y,
            (tuple(box[0]), tuple(box[1]))))
    if kind == "dynamic":
        # I = p(E) + rate_gain * dE/dt
        p = chk.numbers(sec, "dut", "static", required=True)
        k = chk.number(sec, "dut", "rate_gain", 0.0)
        box = sec.get("domain", [[-10, 10], [-100, 100]])
        if p is None:
            return None
        poly = dut_mod.polynomial(p)
        return chk.attempt("dut", lambda: dut_mod.DynamicDut(lambda E, r: poly(E) + k * r,
                                                             (tuple(box[0]), tuple(box[1]))))
    return None


def _build_weighting(sec, chk, section="weighting"):
    kind = chk.choice(sec, section, "kind", ("moment", "derivative", "richardson", "boxcar", "chebyshev",
                                             "comb", "discrete", "continuous", "grid2d"))
    num = lambda k, **kw: chk.number(sec, section, k, **kw)
    if kind == "moment":
        nodes = chk.numbers(sec, section, "nodes", required=True)
        d = num("kill", default=1, integer=True, nonneg=True)
        norm = num("normalization", default=1.0)
        if nodes is None or d is None:
            return None
        return chk.attempt(section, lambda: wmod.moment_design(nodes, d, 0.0, norm))
    if kind == "derivative":
        h = num("h", required=True, positive=True)
        return None if h is None else wmod.derivative_stencil(0.0, h)
    if kind == "richardson":
        h = num("h", required=True, positive=True)
        r = num("ratio", default=2.5, positive=True)
        return None if h is None else chk.attempt(section, lambda: wmod.richardson_derivative(0.0, h, r))
    if kind == "boxcar":
        hw = num("half_width", required=True, positive=True)
        return None if hw is None else wmod.boxcar_with_end_deltas(-hw, hw)
    if kind == "chebyshev":
        sp = num("spacing", required=True, positive=True)
        n = num("n_comb", default=4, integer=True, positive=True)
        at = num("attenuation_db", default=60.0, positive=True)
        if sp is None or n is None:
            return None
        return chk.attempt(section, lambda: wmod.chebyshev_comb(0.0, sp, n, at))
    if kind == "comb":
        nodes = chk.numbers(sec, section, "comb_nodes", required=True)
        coef = chk.numbers(sec, section, "coefficients", required=True)
        if nodes is None or coef is None:
            return None
        return chk.attempt(section, lambda: wmod.delta_minus_comb(0.0, nodes, coef))
    if kind == "discrete":
        nodes = chk.numbers(sec, section, "nodes", required=True)
        weights = chk.numbers(sec, section, "weights", required=True)
        if nodes is None or weights is None:
            return None
        return chk.attempt(section, lambda: wmod.DiscreteWeighting(nodes, weights, 0.0))
    if kind == "continuous":
        coeffs = chk.numbers(sec, section, "coeffs", required=True)
        sup = chk.numbers(sec, section, "support", required=True, min_len=2)
        deltas = sec.get("deltas", [])
        if coeffs is None or sup is None:
            return None
        return chk.attempt(section, lambda: wmod.ContinuousWeighting(
            wmod.PolynomialProfile(tuple(coeffs)), tuple(sup), tuple(map(tuple, deltas)), 0.0))
    if kind == "grid2d":
        xs = chk.numbers(sec, section, "xs", required=True)
        ys = chk.numbers(sec, section, "ys", required=True)
        W = chk.numbers(sec, section, "weights", required=True)
        if None in (xs, ys, W):
            return None
        return chk.attempt(section, lambda: wmod.Weighting2D(xs, ys, W))
    return None


def _build_noise(sec, chk, period):
    if not sec:
        return noise_mod.NoiseModel("white", 0.0)
    kind = chk.choice(sec, "noise", "kind", ("white", "colored"), "white")
    seed = chk.number(sec, "noise", "seed", integer=True)
    if kind == "white":
        P = chk.number(sec, "noise", "P_n", 0.0, nonneg=True)
        return chk.attempt("noise", lambda: noise_mod.NoiseModel("white", P or 0.0, seed=seed))
    table = sec.get("table")
    if not isinstance(table, list) or not table or not all(isinstance(e, dict) and "l" in e and "P" in e
                                                           for e in table):
        chk.add("noise.table", "must be a nonempty list of {l, P} entries")
        return None
    return chk.attempt("noise", lambda: noise_mod.NoiseModel(
        "colored", table=tuple((e["l"], e["P"]) for e in table), period=period or 1.0, seed=seed))


class Experiment:
    """Validated, fully built experiment."""

    def __init__(self, cfg: dict, out=None, seed=None, trials=None):
        chk = _Checker()
        self.raw = cfg
        for key in cfg:
            if key not in ("mode", "seed", "dut", "weighting", "noise", "measurement", "sweep", "output",
                           "narrowband", "lockin", "dual", "compare"):
                chk.add(key, "unknown section")
        mode = cfg.get("mode")
        if mode not in MODES:
            chk.add("mode", f"must be one of {list(MODES)}")
        self.mode = mode
        if "dut" not in cfg or not isinstance(cfg.get("dut"), dict):
            chk.add("dut", "required section missing")
        if mode in NEEDS_WEIGHTING and not isinstance(cfg.get("weighting"), dict):
            chk.add("weighting", f"required section missing for mode {mode!r}")
        master = cfg.get("seed", 0) if seed is None else seed
        if isinstance(master, bool) or not isinstance(master, int) or master < 0:
            chk.add("seed", "must be a nonnegative integer")
            master = 0
        self.seed = master

        m = cfg.get("measurement", {})
        self.period = chk.number(m, "measurement", "period", 1.0, positive=True)
        periods = chk.number(m, "measurement", "periods", 1, integer=True, positive=True)
        ntr = chk.number(m, "measurement", "trials", 1, integer=True, positive=True)
        if trials is not None:
            ntr = trials
        rate = chk.number(m, "measurement", "sample_rate", None, positive=True)
        flt = chk.choice(m, "measurement", "filter", ("boxcar", "lowpass"), "boxcar")
        cutoff = chk.number(m, "measurement", "cutoff", None, positive=True)
        gain = chk.choice(m, "measurement", "gain", ("apply", "raw"), "apply")
        self.order = chk.choice(m, "measurement", "order", ("ascending", "descending", "randomized"),
                                "ascending")
        self.samples = chk.number(m, "measurement", "samples", 4096, integer=True, positive=True)
        slot = m.get("slot_mode", False)
        if not isinstance(slot, bool):
            chk.add("measurement.slot_mode", "must be true or false")
            slot = False
        self.config = chk.attempt("measurement", lambda: meter.MeasurementConfig(
            periods=periods or 1, sample_rate=rate, filter=flt or "boxcar", cutoff=cutoff, slot_mode=slot,
            gain=gain or "apply", trials=ntr or 1, seed=master))

        self.dut = _build_dut(cfg["dut"], chk) if isinstance(cfg.get("dut"), dict) else None
        self.weighting = None
        self.weighting_d = None
        if mode in NEEDS_WEIGHTING and isinstance(cfg.get("weighting"), dict):
            wsec = cfg["weighting"]
            if mode == "dual":
                for sub in ("value", "derivative"):
                    if not isinstance(wsec.get(sub), dict):
                        chk.add(f"weighting.{sub}", "required table for dual mode")
                if isinstance(wsec.get("value"), dict) and isinstance(wsec.get("derivative"), dict):
                    self.weighting = _build_weighting(wsec["value"], chk, "weighting.value")
                    self.weighting_d = _build_weighting(wsec["derivative"], chk, "weighting.derivative")
            else:
                self.weighting = _build_weighting(wsec, chk)
        self.noise = _build_noise(cfg.get("noise", {}), chk, self.period)

        sw = cfg.get("sweep")
        self.waypoints = [0.0]
        self.margin = 1.0
        if sw is not None:
            if "waypoints" in sw:
                wp = chk.numbers(sw, "sweep", "waypoints", required=True)
                self.waypoints = wp or [0.0]
            else:
                a = chk.number(sw, "sweep", "start", required=True)
                b = chk.number(sw, "sweep", "stop", required=True)
                n = chk.number(sw, "sweep", "points", required=True, integer=True, positive=True)
                if None not in (a, b, n):
                    self.waypoints = list(np.linspace(a, b, n))
            self.margin = chk.number(sw, "sweep", "margin", 1.0, positive=True)
            if self.margin is not None and self.margin > 1:
                chk.add("sweep.margin", "must be <= 1")

        self.section = {k: cfg.get(k, {}) for k in ("narrowband", "lockin", "dual", "compare")}
        if mode == "lockin":
            lk = self.section["lockin"]
            chk.number(lk, "lockin", "amplitude", required=True, positive=True)
        if mode == "narrowband":
            nb = self.section["narrowband"]
            chk.number(nb, "narrowband", "omega0", required=True, positive=True)
            chk.number(nb, "narrowband", "half_periods", None, integer=True, positive=True)
        if mode == "dual":
            mu = self.section["dual"].get("mu", [0.5, 0.5])
            if (not isinstance(mu, list) or len(mu) != 2 or any(not isinstance(x, (int, float)) or x < 0 for x in mu)
                    or abs(sum(mu) - 1) > 1e-12):
                chk.add("dual.mu", "must be two nonnegative numbers summing to 1")
        if mode in ("map2d", "dynamic") and self.weighting is not None and not isinstance(
                self.weighting, wmod.Weighting2D):
            chk.add("weighting.kind", f"mode {mode!r} needs kind = 'grid2d'")
        if mode == "map2d" and self.dut is not None and not isinstance(self.dut, dut_mod.CharacteristicMap2D):
            chk.add("dut.kind", "mode 'map2d' needs kind = 'map2d'")
        if mode == "dynamic" and self.dut is not None and not isinstance(self.dut, dut_mod.DynamicDut):
            chk.add("dut.kind", "mode 'dynamic' needs kind = 'dynamic'")
        if mode not in ("map2d", "dynamic") and self.dut is not None and not isinstance(
                self.dut, dut_mod.Characteristic1D):
            chk.add("dut.kind", f"mode {mode!r} needs a 1-D device")

        o = cfg.get("output", {})
        self.out = Path(out if out is not None else o.get("dir", "corrsynth_out"))
        self.prefix = o.get("prefix", "run")
        if not isinstance(self.prefix, str) or not self.prefix:
            chk.add("output.prefix", "must be a nonempty string")
        chk.raise_if_any()
        effective = dict(cfg)
        effective["seed"] = self.seed
        if trials is not None:
            effective.setdefault("measurement", {})
            effective["measurement"] = dict(effective["measurement"], trials=trials)
        self.effective = effective
        self.trials_override = trials
        self.hash = config_hash(effective)

    # -- synthesis ---------------------------------------------------------
    def schedule(self):
        """``(schedule, reference, info)`` for the configured mode."""
        w, T = self.weighting, self.period
        if self.mode == "discrete":
            if not isinstance(w, wmod.DiscreteWeighting):
                raise ConfigError({"weighting.kind": "mode 'discrete' needs a discrete weighting"})
            s, u = synthesis.synthesize_discrete(w, T, self.order, self.seed)
            return s, u, {}
        if self.mode == "continuous":
            if not isinstance(w, wmod.ContinuousWeighting):
                raise ConfigError({"weighting.kind": "mode 'continuous' needs a continuous weighting"})
            s, u = synthesis.synthesize_continuous(w, T, self.samples)
            return s, u, {}
        if self.mode == "narrowband":
            nb = self.section["narrowband"]
            s, u, info = synthesis.synthesize_narrowband(w, float(nb["omega0"]), float(nb.get("u0", 1.0)),
                                                         nb.get("half_periods"))
            return s, u, info
        if self.mode == "dynamic":
            s, u = synthesis.synthesize_dynamic(w, T)
            return s, u, {"closure_gap": synthesis.closure_gap(s)}
        if self.mode == "dual":
            d = synthesis.synthesize_dual(w, self.weighting_d, self.section["dual"].get("mu", [0.5, 0.5]), T,
                                          self.order)
            return d.schedule, d.reference_c, {"dual": d}
        if self.mode == "lockin":
            a = float(self.section["lockin"]["amplitude"])
            s, u = lockin.harmonic_schedule(a, T, int(self.section["lockin"].get("cells", 256)))
            return s, u, {}
        if self.mode == "map2d":
            return synthesis.synthesize_2d(w, T), None, {}
        raise ConfigError({"mode": "unsupported"})


# ---------------------------------------------------------------------------
# output helpers

def _csv_text(header_hash, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# corrsynth config_sha256={header_hash}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    wr.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _json_text(header_hash, payload) -> str:
    return json.dumps({"config_sha256": header_hash, **payload}, sort_keys=True, indent=2,
                      default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return str(x)


# ---------------------------------------------------------------------------
# commands

def cmd_run(ex: Experiment) -> dict:
    mode = ex.mode
    s, u, info = ex.schedule()
    rows = []
    extra = {}
    if mode == "map2d":
        res = meter.measure_2d(ex.dut, s, ex.noise, ex.config)
        rows = [[repr(0.0), repr(res.estimate), repr(res.sample_variance), str(ex.config.periods), str(ex.seed)]]
        columns = meter.RESULT_COLUMNS
    elif mode == "dual":
        dual = info.pop("dual")
        children = np.random.SeedSequence(ex.seed).spawn(len(ex.waypoints))
        columns = ["E_c", "estimate_c", "sample_variance_c", "estimate_d", "sample_variance_d", "n_periods",
                   "seed"]
        for k, e in enumerate(ex.waypoints):
            rc, rd = meter.measure_dual(ex.dut, dual, ex.noise, ex.config, E_c=e,
                                        rng=np.random.default_rng(children[k]))
            rows.append([repr(float(e)), repr(rc.estimate), repr(rc.sample_variance), repr(rd.estimate),
                         repr(rd.sample_variance), str(ex.config.periods), str(ex.seed)])
    else:
        control = meter.ControlSweep(tuple(ex.waypoints), margin=ex.margin)
        if mode == "dynamic" or len(ex.waypoints) == 1:
            children = np.random.SeedSequence(ex.seed).spawn(len(ex.waypoints))
            results = [meter.measure(ex.dut, s, u, ex.noise, ex.config, E_c=e if mode != "dynamic" else s.center,
                                     rng=np.random.default_rng(children[k])) for k, e in enumerate(ex.waypoints)]
        else:
            results = meter.sweep(ex.dut, s, u, ex.noise, ex.config, control).results
        rows = meter.results_rows(ex.waypoints, results, ex.seed)
        columns = meter.RESULT_COLUMNS
        if mode == "narrowband":
            # optimal stepwise/continuous reference at the same period, same noise, for the ratio
            w = ex.weighting
            if isinstance(w, wmod.DiscreteWeighting):
                so, uo = synthesis.synthesize_discrete(w, s.period)
            else:
                so, uo = synthesis.synthesize_continuous(w, s.period, ex.samples)
            cfg = ex.config.replace(seed=ex.seed + 1)
            ro = meter.measure(ex.dut, so, uo, ex.noise, cfg, E_c=ex.waypoints[0])
            rn = results[0]
            measured = rn.sample_variance / ro.sample_variance if ro.sample_variance > 0 else float("nan")
            extra["narrowband"] = dict(info, measured_ratio=measured, predicted_ratio=math.pi ** 2 / 8,
                                       variance_narrowband=rn.sample_variance, variance_optimal=ro.sample_variance)
    name = ex.prefix
    _write(ex.out / f"{name}_estimates.csv", _csv_text(ex.hash, columns, rows))
    report = dict(mode=mode, seed=ex.seed, config=ex.effective, schedule_info=info, **extra)
    _write(ex.out / f"{name}_report.json", _json_text(ex.hash, report))
    return report


def cmd_synth(ex: Experiment, emit: Path):
    s, u, info = ex.schedule()
    if ex.mode == "map2d":
        payload = dict(period=s.period, xs=s.xs, ys=s.ys, dwells=s.dwells, ref=s.reference.values,
                       calibration=s.reference.calibration)
        _write(emit, _json_text(ex.hash, payload))
        return
    if emit.suffix.lower() == ".csv":
        _write(emit, f"# corrsynth config_sha256={ex.hash}\n" + synthesis.waveform_csv(s, u))
    else:
        d = synthesis.schedule_to_dict(s, u)
        d["config_sha256"] = ex.hash
        _write(emit, json.dumps(d, sort_keys=True) + "\n")


def cmd_compare(ex: Experiment) -> list:
    c = ex.section["compare"]
    targets = c.get("targets", list(lockin.TARGETS))
    noise = ex.noise if not ex.noise.is_zero else noise_mod.NoiseModel("white", 1e-4)
    reports = lockin.compare_systems(ex.dut, list(targets), budget=float(c.get("budget", 0.04)),
                                     test_time=float(c.get("test_time", 21.0)), noise=noise,
                                     trials=int(ex.trials_override or c.get("trials", 2000)),
                                     points=int(c.get("points", 21)), seed=ex.seed)
    text = lockin.reports_csv(reports, ex.seed)
    _write(ex.out / f"{ex.prefix}_comparison.csv", f"# corrsynth config_sha256={ex.hash}\n" + text)
    _write(ex.out / f"{ex.prefix}_comparison.json",
           _json_text(ex.hash, dict(reports=[json.loads(r.to_json()) for r in reports])))
    return reports


def selftest_checks(gain: str = "apply"):
    """Bundled calibrator suite: ``(name, passed, detail)`` tuples."""
    cfg = meter.MeasurementConfig(gain=gain)
    checks = []
    gauss = dut_mod.auger_spectrum(0.0, 1.0, 1.0, background=(0.3, 0.05))
    ramp = dut_mod.Characteristic1D(lambda E: 0 * np.asarray(E, dtype=float), dut_mod.polynomial([0.5, 2.0]),
                                    (-5.0, 5.0))
    # (name, calibrator, weighting, rejects affine backgrounds)
    library = [
        ("ramp/moment_d1", ramp, wmod.moment_design([-1, -0.5, 0, 0.5, 1], 1, 0.0), True),
        ("gauss/boxcar", gauss, wmod.boxcar_with_end_deltas(-2.0, 2.0), True),
        ("gauss/derivative", gauss, wmod.derivative_stencil(0.5, 0.1), False),
        ("gauss/richardson", gauss, wmod.richardson_derivative(0.5, 0.2), False),
        ("gauss/chebyshev", gauss, wmod.chebyshev_comb(0.0, 1.5, 4), True),
    ]
    line = dut_mod.polynomial([1.0, 1.0])
    for name, cal, w, rejects in library:
        if isinstance(w, wmod.DiscreteWeighting):
            s, u = synthesis.synthesize_discrete(w, 1.0)
        else:
            s, u = synthesis.synthesize_continuous(w, 1.0, 4096)
        rep = meter.self_test(cal, s, u, cfg, weighting=w, name=name)
        checks.append((f"calibrate {name}", rep.passed,
                       f"expected={rep.expected:.12g} measured={rep.measured:.12g} dev={rep.deviation:.2e}"
                       + ("" if rep.passed else f" factor={rep.factor:.6g}")))
        v = synthesis.verify_synthesis(s, u, w)
        checks.append((f"synthesis {name}", v.passed, f"residual={v.max_norm:.2e} tol={v.tolerance:g}"))
        if rejects:
            res = wmod.background_residual(w, line)
            checks.append((f"affine background {name}", abs(res) <= 1e-9 * w.gamma_total,
                           f"residual={res:.3e}"))
    return checks


def cmd_selftest(gain: str) -> int:
    checks = selftest_checks(gain)
    failed = 0
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        failed += not ok
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="corrsynth", description="optimal correlation test-system bench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the configured measurement pipeline")
    r.add_argument("config")
    r.add_argument("--out", default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--trials", type=int, default=None)

    s = sub.add_parser("selftest", help="calibrator suite and synthesis residuals")
    s.add_argument("--gain", choices=("apply", "raw"), default="apply")

    y = sub.add_parser("synth", help="emit the synthesized schedule only")
    y.add_argument("config")
    y.add_argument("--emit", required=True, help="output path, .json schedule or .csv waveform")

    c = sub.add_parser("compare", help="lock-in versus optimal comparison")
    c.add_argument("config")
    c.add_argument("--out", default=None)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--trials", type=int, default=None)
    return p


def _error(kind, message, problems=None, code=2):
    payload = {"error": kind, "message": message}
    if problems:
        payload["problems"] = problems
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "selftest":
        return cmd_selftest(args.gain)
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        return _error("config", f"config file not found: {args.config}", {"config": "file not found"})
    except tomllib.TOMLDecodeError as exc:
        return _error("config", f"TOML parse error: {exc}", {"config": str(exc)})
    try:
        if args.command == "synth":
            ex = Experiment(cfg)
            cmd_synth(ex, Path(args.emit))
        elif args.command == "compare":
            if args.trials is not None and args.trials < 1000:
                raise ConfigError({"--trials": "comparison needs >= 1000"})
            ex = Experiment(cfg, out=args.out, seed=args.seed, trials=args.trials)
            for r in cmd_compare(ex):
                print(f"{r.target:13s} ratio={r.ratio:.3g} lockin_sys={r.systematic_error_lockin:.3g}"
                      f" optimal_sys={r.systematic_error_optimal:.3g}")
        else:
            if args.trials is not None and args.trials < 1:
                raise ConfigError({"--trials": "must be >= 1"})
            ex = Experiment(cfg, out=args.out, seed=args.seed, trials=args.trials)
            cmd_run(ex)
            log.info("wrote %s", ex.out)
    except ConfigError as exc:
        return _error("config", str(exc), exc.problems)
    except CorrsynthError as exc:
        return _error(type(exc).__name__, str(exc), code=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
