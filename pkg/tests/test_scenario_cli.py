import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from densteer import cli
from densteer.errors import ScenarioError
from densteer.scenario import (apply_overrides, bundled_names, bundled_path, load,
                               parse_override, scenario_hash, validate)

INLINE = {
    "name": "inline",
    "system": {"f": ["x2", "0"], "G": [["0", "1"]],
               "domain": {"lower": [-3, -3], "upper": [3, 3]}},
    "outputs": ["x1"],
    "x0": [0.0, 0.0],
    "run_mode": "analyze",
}


def write(tmp_path, data, name="s.scn"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def paths(diags):
    return [d.path for d in diags]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- scenario files

def test_bundled_scenarios_validate():
    names = bundled_names()
    assert {"paper_example.scn", "toy1d_bridge.scn", "toy2d_nonlinear.scn",
            "double_integrator.scn"} <= set(names)
    for name in names:
        assert validate(load(bundled_path(name))) == []


def test_inline_well_formed(tmp_path):
    assert validate(load(write(tmp_path, INLINE))) == []


def test_defaults_filled(tmp_path):
    scn = load(write(tmp_path, INLINE))
    assert scn["epsilon"] == 0.5 and scn["seed"] == 0 and scn["scheme"] == "euler_maruyama"


def test_G_column_length(tmp_path):
    bad = apply_overrides(INLINE, [("system.G", [["0", "1", "2"]])])
    diags = validate(load(write(tmp_path, bad)))
    assert "system.G[0]" in paths(diags)
    assert "expected 2 expressions, got 3" in str(diags[0])


def test_output_count_must_match_inputs(tmp_path):
    bad = {**INLINE, "outputs": ["x1", "x2"]}
    diags = validate(load(write(tmp_path, bad)))
    assert paths(diags) == ["outputs"]
    assert "one output per input" in diags[0].message


@pytest.mark.parametrize("override, path", [
    (("system.f", ["x2 +", "0"]), "system.f[0]"),
    (("system.f", ["y", "0"]), "system.f[0]"),
    (("x0", [0.0]), "x0"),
    (("system.domain.lower", [3, -3]), "system.domain"),
    (("epsilon", -1.0), "epsilon"),
    (("dt", 0.3), "dt"),
    (("scheme", "heun"), "scheme"),
    (("run_mode", "fly"), "run_mode"),
    (("seed", -2), "seed"),
])
def test_field_paths(tmp_path, override, path):
    diags = validate(load(write(tmp_path, apply_overrides(INLINE, [override]))))
    assert path in paths(diags)


def test_endpoints_required_for_steer(tmp_path):
    diags = validate(load(write(tmp_path, {**INLINE, "run_mode": "steer"})))
    assert "endpoints" in paths(diags)


def test_grid_file_must_exist(tmp_path):
    data = {**INLINE, "run_mode": "steer",
            "endpoints": {"rho0": {"grid_file": "missing.csv"},
                          "rho1": {"gaussian": {"mean": [0, 0], "cov": [[1, 0], [0, 1]]}}},
            "grid": {"lower": [-1, -1], "upper": [1, 1], "shape": [10, 10]}}
    diags = validate(load(write(tmp_path, data)))
    assert paths(diags) == ["endpoints.rho0.grid_file"]
    assert "missing.csv" in diags[0].message


def test_missing_file_raises():
    with pytest.raises(ScenarioError, match="nowhere.scn"):
        load("nowhere.scn")


def test_overrides():
    assert parse_override("grid.shape=[10, 20]") == ("grid.shape", [10, 20])
    assert parse_override("epsilon=0.25") == ("epsilon", 0.25)
    with pytest.raises(ScenarioError):
        parse_override("epsilon")
    out = apply_overrides({"grid": {"shape": [1]}}, ["grid.shape=[4]", "seed=3"])
    assert out == {"grid": {"shape": [4]}, "seed": 3}


def test_hash_canonical():
    a = {"b": [1, 2], "a": {"y": 1.0, "x": "s"}}
    b = {"a": {"x": "s", "y": 1.0}, "b": [1, 2]}
    assert scenario_hash(a) == scenario_hash(b)
    assert scenario_hash(a) != scenario_hash({**a, "b": [2, 1]})
    assert len(scenario_hash(a)) == 64


def test_hash_ignores_comments(tmp_path):
    p = write(tmp_path, INLINE)
    q = tmp_path / "t.scn"
    q.write_text("# comment\n" + p.read_text())
    assert load(p).digest() == load(q).digest()


# ---------------------------------------------------------------- runs

def test_paper_example_analyze(tmp_path, capsys):
    assert cli.run("paper_example", tmp_path, plots=False) == 0
    a = json.loads((tmp_path / "analysis.json").read_text())
    assert a["relative_degree"] == [3, 2]
    assert a["total_relative_degree"] == 5
    assert np.abs(np.array(a["decoupling_matrix_at_x0"]) - [[1, 1], [0, 1]]).max() < 1e-12
    assert a["proposition1"]["feasible"] is True
    assert np.array(a["A"]).shape == (5, 5) and np.array(a["B"]).shape == (5, 2)
    rows = read_csv(tmp_path / "spot_table.csv")
    assert {r["quantity"] for r in rows} == {"x", "tau", "delta", "Gamma"}
    summary = json.loads(capsys.readouterr().out)
    assert summary["analyze"]["relative_degree"] == [3, 2]


def test_manifest(tmp_path):
    assert cli.run("paper_example", tmp_path, overrides=["seed=11"], plots=False) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    scn = load(bundled_path("paper_example"), ["seed=11"])
    assert m["scenario_hash"] == scn.digest()
    assert m["parameters"]["seed"] == 11
    assert m["run_mode"] == "analyze"
    assert {"densteer", "numpy", "python"} <= set(m["versions"])
    assert "analysis.json" in m["artifacts"]
    assert "started" not in json.dumps(m)
    t = json.loads((tmp_path / "timestamp.json").read_text())
    assert set(t) == {"started", "finished"}


def test_missing_file_exit_2(tmp_path, capsys):
    code = cli.main(["run", str(tmp_path / "absent.scn"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "absent.scn" in capsys.readouterr().err


def test_invalid_exit_2(tmp_path, capsys):
    p = write(tmp_path, {**INLINE, "outputs": ["x1", "x2"]})
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "outputs" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_validate_command(tmp_path, capsys):
    assert cli.main(["validate", "toy1d_bridge"]) == 0
    assert capsys.readouterr().out == ""
    p = write(tmp_path, {**INLINE, "outputs": ["x1", "x2"]})
    assert cli.main(["validate", str(p)]) == 2
    assert capsys.readouterr().out.startswith("outputs:")
    assert cli.main(["validate", str(p), "--set", "outputs=[x1]"]) == 0


def test_numerical_failure_exit_3(tmp_path):
    # max_iter = 2 cannot reach the tolerance
    code = cli.run("toy1d_bridge", tmp_path, overrides=["max_iter=2", "grid.shape=[100]", "nt=50"],
                   mode="steer", plots=False)
    assert code == 3
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["error"] == "NoConvergenceError"
    assert diag["module"] == "bridge"
    assert len(diag["residual_history"]) == 2


SMALL = ["N=2000", "dt=0.01", "record_every=10"]


@pytest.fixture(scope="module")
def toy1d_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy1d")
    assert cli.run("toy1d_bridge", out, overrides=SMALL, plots=True) == 0
    return out


def test_toy1d_all(toy1d_run):
    m = json.loads((toy1d_run / "manifest.json").read_text())
    steer = m["summary"]["steer"]
    assert steer["iterations"] < 200
    assert steer["final_change"] < 1e-8
    assert max(steer["boundary_l1"]) < 1e-2
    golden = json.loads((Path(__file__).parent / "golden" / "toy1d_bridge.json").read_text())
    assert steer["iterations"] == golden["iterations"]
    assert steer["control_energy"] == pytest.approx(golden["energy"], rel=1e-9)
    sim = m["summary"]["simulate"]
    assert abs(sim["terminal_mean"][0] - 1.0) < 0.1
    for name in ("moment_path.csv", "simulation_report.json", "trajectories_z.csv",
                 "trajectories_x.csv", "particle_moments.csv", "analysis.json"):
        assert name in m["artifacts"]
    assert any(a.endswith(".png") for a in m["artifacts"])
    assert any(a.startswith("bridge/") for a in m["artifacts"])


def test_moment_path_long_format(toy1d_run):
    rows = read_csv(toy1d_run / "moment_path.csv")
    assert set(rows[0]) == {"t", "statistic", "value"}
    mean = {float(r["t"]): float(r["value"]) for r in rows if r["statistic"] == "mean1"}
    assert mean[0.0] == pytest.approx(-1.0, abs=1e-3)
    assert mean[1.0] == pytest.approx(1.0, abs=1e-3)


def test_same_seed_identical_csv(toy1d_run, tmp_path):
    assert cli.run("toy1d_bridge", tmp_path, overrides=SMALL, plots=False) == 0
    csvs = sorted(p.relative_to(toy1d_run) for p in toy1d_run.rglob("*.csv"))
    assert csvs
    for rel in csvs:
        assert (toy1d_run / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel
    a = json.loads((toy1d_run / "manifest.json").read_text())
    b = json.loads((tmp_path / "manifest.json").read_text())
    assert a["scenario_hash"] == b["scenario_hash"]


def test_other_seed_differs(toy1d_run, tmp_path):
    assert cli.run("toy1d_bridge", tmp_path, overrides=SMALL + ["seed=8"], mode="simulate",
                   plots=False) == 0
    a = (toy1d_run / "trajectories_z.csv").read_bytes()
    assert a != (tmp_path / "trajectories_z.csv").read_bytes()
