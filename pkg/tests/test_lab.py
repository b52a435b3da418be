import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from embedlab.lab import ConfigError, bundled_scenarios, convergence_study, load_scenario, parse_scenario, run
from embedlab.lab.cli import main
from embedlab.lab.config import build_curve, mesh_ladder, number, resolve
from embedlab.lab.runner import OUTPUT_ENV, ScenarioError, scenario_theorem_a

BUNDLED = {
    "circle",
    "ellipse-3-7",
    "ellipse-3-7-minor",
    "lens-3pi4",
    "hkl-perturbed-ellipse",
    "quasimode-ladder",
    "type-t-ellipse",
    "theorem-a",
    "theorem-b",
}


def _doc(**over):
    doc = {
        "schema": 1,
        "name": "tiny",
        "analyses": ["spectrum"],
        "curve": {"kind": "ellipse", "R": 1.0, "rho0": "atanh(3/7)"},
        "mesh": {"kind": "uniform", "N": [32]},
    }
    doc.update(over)
    return doc


# -- config ----------------------------------------------------------------------


def test_number_expressions():
    assert number("3*pi/4") == pytest.approx(3 * math.pi / 4)
    assert number("atanh(3/7)") == pytest.approx(math.atanh(3 / 7))
    assert number("-2**3") == -8.0
    assert number(5) == 5.0
    for bad in ("__import__('os')", "x + 1", "pi.real", True, [1]):
        with pytest.raises(ConfigError):
            number(bad)


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_number_roundtrip(x):
    assert number(repr(x)) == x


def test_bundled_scenarios_parse():
    found = bundled_scenarios()
    assert set(found) == BUNDLED
    for path in found.values():
        scen = load_scenario(path)
        assert scen.name == path.stem
        assert len(scen.config_hash) == 64


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_scenario(_doc(colour="blue"))
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_scenario(_doc(curve={"kind": "circle", "radius": 1, "centre": 0}))
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_scenario(_doc(tolerances={"halff": 1e-8}))
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_scenario(_doc(mesh={"kind": "uniform", "N": 32, "M": 2}))


def test_schema_and_preconditions():
    with pytest.raises(ConfigError, match="schema"):
        parse_scenario(_doc(schema=2))
    with pytest.raises(ConfigError, match="unknown analyses"):
        parse_scenario(_doc(analyses=["spectrum", "magic"]))
    with pytest.raises(ConfigError, match="symmetry"):
        parse_scenario(_doc(analyses=["parity"]))
    with pytest.raises(ConfigError, match="two mesh levels"):
        parse_scenario(_doc(analyses=["embedded"], symmetry="major"))
    with pytest.raises(ConfigError, match="quasimode"):
        parse_scenario(_doc(analyses=["quasimode"]))
    with pytest.raises(ConfigError, match="kind"):
        parse_scenario(_doc(curve={"kind": "hexagon"}))


def test_tolerance_override():
    scen = parse_scenario(_doc(tolerances={"half": "1e-6"}))
    assert scen.tolerances["half"] == 1e-6
    assert scen.tolerances["margin"] == 0.01


def test_config_hash_is_canonical():
    a = parse_scenario(_doc())
    b = parse_scenario(dict(reversed(list(_doc().items()))))
    assert a.config_hash == b.config_hash
    assert parse_scenario(_doc(name="other")).config_hash != a.config_hash


def test_mesh_ladder_forms():
    assert mesh_ladder({"kind": "uniform", "N": [16, 32]}) == [("uniform", 16), ("uniform", 32)]
    lad = mesh_ladder({"kind": "graded", "depth": [10, 20]})
    assert [e[1].depth for e in lad] == [10, 20]
    lad = mesh_ladder({"kind": "graded", "depth": 16, "levels": 3})
    assert [e[2] for e in lad] == [0, 1, 2]
    with pytest.raises(ConfigError):
        mesh_ladder({"kind": "graded", "depth": [10], "levels": 2})
    with pytest.raises(ConfigError):
        mesh_ladder({"kind": "uniform"})


def test_build_type_t_curve():
    spec = {"kind": "type-t", "base": {"kind": "ellipse", "rho0": "atanh(3/7)", "start_angle": "pi/2"}, "theta": "0.8*pi", "delta": 0.2}
    curve, tp = build_curve(spec)
    assert tp is not None and len(curve.corners) == 1
    assert curve.corners[0].theta == pytest.approx(0.8 * math.pi)
    with pytest.raises(ConfigError):
        build_curve({"kind": "type-t", "theta": 2.0, "delta": 0.1})


def test_resolve():
    assert resolve("circle").name == "circle.toml"
    with pytest.raises(ConfigError):
        resolve("no-such-scenario")


def test_bad_toml(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("schema = = 1")
    with pytest.raises(ConfigError):
        load_scenario(p)


# -- runner --------------------------------------------------------------------------


def test_run_circle(tmp_path):
    report = run(load_scenario(resolve("circle")), out_dir=tmp_path)
    assert report.passed
    spec = report.analyses["spectrum"]
    assert abs(spec["half"] - 0.5) < 1e-12
    out = tmp_path / "circle"
    for name in ("report.json", "spectrum.csv", "mesh.csv", "summary.txt"):
        assert (out / name).exists()
    data = json.loads((out / "report.json").read_text())
    assert data["passed"] and data["version"] and len(data["config_hash"]) == 64
    assert [lv["n"] for lv in data["levels"]] == [16, 32, 64]


def test_run_ellipse_alpha_table(tmp_path):
    report = run(load_scenario(resolve("ellipse-3-7")), out_dir=tmp_path)
    assert report.passed
    table = report.analyses["spectrum"]["alpha_table"]
    assert [row["n"] for row in table] == [1, 2, 3, 4, 5]
    assert max(row["plus_error"] for row in table) < 1e-8
    assert table[0]["alpha"] == pytest.approx(0.2)


def test_determinism(tmp_path):
    scen = load_scenario(resolve("ellipse-3-7-minor"))
    run(scen, out_dir=tmp_path / "a")
    run(scen, out_dir=tmp_path / "b")
    for name in ("spectrum.csv", "mesh.csv"):
        assert (tmp_path / "a" / scen.name / name).read_bytes() == (tmp_path / "b" / scen.name / name).read_bytes()


def test_output_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    report = run(load_scenario(resolve("circle")))
    assert report.output_dir == str(tmp_path / "env" / "circle")


def test_failed_run_flushes_partial_results(tmp_path):
    doc = _doc(name="broken", analyses=["spectrum", "quasimode"], quasimode={"base": {"kind": "ellipse", "rho0": 0.5}, "theta": 0.8, "deltas": [5.0]})
    with pytest.raises(ScenarioError, match="broken"):
        run(parse_scenario(doc), out_dir=tmp_path)
    data = json.loads((tmp_path / "broken" / "report.json").read_text())
    assert not data["passed"]
    assert data["verdicts"][-1]["name"] == "run"


def test_convergence_alpha1():
    rows = convergence_study(load_scenario(resolve("ellipse-3-7")), "alpha1")
    assert [r["n"] for r in rows] == [64, 128, 256]
    err = [r["error"] for r in rows]
    assert err[0] / max(err[1], 1e-16) > 10 or err[1] < 1e-14


def test_convergence_circle_lambda_max():
    rows = convergence_study(load_scenario(resolve("circle")), "lambda_max")
    assert all(abs(r["value"] - 0.5) < 1e-12 for r in rows)


def test_convergence_errors():
    with pytest.raises(ScenarioError, match="three"):
        convergence_study(parse_scenario(_doc()), "half")
    scen = load_scenario(resolve("circle"))
    with pytest.raises(ScenarioError, match="not defined"):
        convergence_study(scen, "colour")


def test_theorem_inward_and_outward_bookkeeping():
    scen = load_scenario(resolve("theorem-a"))
    data, verdicts = scenario_theorem_a(scen.theorem, scen.tolerances)
    assert all(v.passed for v in verdicts)
    assert data["theta"] == pytest.approx(0.8 * math.pi)
    assert data["prediction"]["even"] == [pytest.approx((0.0, 0.3))]
    assert data["prediction"]["odd"] == [pytest.approx((-0.3, 0.0))]


# -- CLI -------------------------------------------------------------------------------


def test_cli_list(capsys):
    assert main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    for name in BUNDLED:
        assert name in out


def test_cli_run_and_exit_codes(tmp_path, capsys):
    assert main(["-o", str(tmp_path), "run", "circle"]) == 0
    assert "scenario circle: PASS" in capsys.readouterr().out
    # a tolerance nobody can meet gives a failing verdict and exit code 1
    p = tmp_path / "strict.toml"
    p.write_text(
        'schema = 1\nname = "strict"\nanalyses = ["spectrum"]\n'
        '[curve]\nkind = "ellipse"\nrho0 = 0.5\n[mesh]\nkind = "uniform"\nN = 16\n'
        "[tolerances]\nhalf = 1e-30\n"
    )
    assert main(["-o", str(tmp_path), "run", str(p)]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text('schema = 1\nname = "bad"\nanalyses = ["nope"]\n')
    assert main(["-o", str(tmp_path), "run", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_convergence(capsys):
    assert main(["convergence", "circle", "lambda_max"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "circle: lambda_max"
    assert len(out) == 5
    vals = [float(line.split()[1]) for line in out[2:]]
    assert np.allclose(vals, 0.5, atol=1e-12)
