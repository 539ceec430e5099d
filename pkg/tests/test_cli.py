import json
from pathlib import Path

import pytest

from corrsynth import cli, synthesis

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
RUN_CONFIGS = ["auger_derivative", "boxcar_area", "narrowband", "dual", "dynamic", "map2d"]


def _files(d: Path):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.mark.parametrize("name", RUN_CONFIGS)
def test_run_bundled_configs(name, tmp_path):
    code = cli.main(["run", str(CONFIGS / f"{name}.toml"), "--out", str(tmp_path), "--trials", "50"])
    assert code == 0
    files = _files(tmp_path)
    csv_name = next(n for n in files if n.endswith("_estimates.csv"))
    lines = files[csv_name].decode().splitlines()
    assert lines[0].startswith("# corrsynth config_sha256=")
    report = json.loads(next(v for n, v in files.items() if n.endswith("_report.json")))
    assert report["config_sha256"] == lines[0].split("=")[1]
    assert report["config"]["measurement"]["trials"] == 50


def test_run_deterministic(tmp_path):
    cfg = str(CONFIGS / "auger_derivative.toml")
    assert cli.main(["run", cfg, "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
    assert cli.main(["run", cfg, "--out", str(tmp_path / "b"), "--seed", "3"]) == 0
    assert cli.main(["run", cfg, "--out", str(tmp_path / "c"), "--seed", "4"]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert _files(tmp_path / "a") != _files(tmp_path / "c")


def test_narrowband_report_ratio(tmp_path):
    assert cli.main(["run", str(CONFIGS / "narrowband.toml"), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "narrowband_report.json").read_text())
    nb = rep["narrowband"]
    assert nb["half_periods"] == [2, 4, 2]
    assert 1.0 < nb["measured_ratio"] < 1.5


def test_synth_emit(tmp_path):
    cfg = str(CONFIGS / "auger_derivative.toml")
    out = tmp_path / "s.json"
    assert cli.main(["synth", cfg, "--emit", str(out)]) == 0
    d = json.loads(out.read_text())
    s, u = synthesis.schedule_from_dict(d)
    assert sum(s.dwells) == pytest.approx(1.0)
    wav = tmp_path / "w.csv"
    assert cli.main(["synth", cfg, "--emit", str(wav)]) == 0
    lines = wav.read_text().splitlines()
    assert lines[0].startswith("# corrsynth config_sha256=") and lines[1] == "t,E_M,u"


def test_compare_command(tmp_path, capsys):
    code = cli.main(["compare", str(CONFIGS / "compare.toml"), "--out", str(tmp_path), "--trials", "1000"])
    assert code == 0
    out = capsys.readouterr().out
    assert "full_current" in out
    rows = (tmp_path / "compare_comparison.csv").read_text().splitlines()
    assert rows[1].startswith("target,")
    assert len(rows) == 5


def test_selftest(capsys):
    assert cli.main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert cli.main(["selftest", "--gain", "raw"]) == 1
    assert "factor=" in capsys.readouterr().out


def _write(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return str(p)


def test_config_errors_collected(tmp_path, capsys):
    path = _write(tmp_path, """
mode = "discrete"
seed = -1
bogus = 1
[dut]
kind = "auger"
width = -1.0
[weighting]
kind = "moment"
[measurement]
period = 0
""")
    assert cli.main(["run", path]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config"
    for key in ("seed", "bogus", "dut.center", "dut.width", "weighting.nodes", "measurement.period"):
        assert key in err["problems"], key


def test_missing_and_malformed_config(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "none.toml")]) == 2
    assert cli.main(["run", _write(tmp_path, "mode = [")]) == 2
    assert "TOML" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys):
    path = _write(tmp_path, """
mode = "discrete"
[dut]
kind = "ohmic"
conductance = 1.0
domain = [-0.1, 0.1]
[weighting]
kind = "derivative"
h = 0.5
""")
    assert cli.main(["run", path, "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "DomainError"


def test_unbalanced_dynamic_rejected(tmp_path, capsys):
    path = _write(tmp_path, """
mode = "dynamic"
[dut]
kind = "dynamic"
static = [0.0, 1.0]
[weighting]
kind = "grid2d"
xs = [0.0, 1.0]
ys = [-1.0, 1.0]
weights = [[1.0, 2.0], [1.0, -1.0]]
""")
    assert cli.main(["run", path, "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "PackingError"
