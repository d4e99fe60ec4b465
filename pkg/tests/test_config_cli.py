import json
from pathlib import Path

import pytest
import yaml

from randperiodic.cli import main
from randperiodic.config import SCHEMA, ConfigError, env_overrides, load_config, model_params, validate
from randperiodic.pipeline import RunManifest, compare_runs, run_pipeline

FAST_A = {
    "run.seed": 3,
    "model.name": "a",
    "model.steps_per_period": 32,
    "model.param.sigma": 0.2,
    "attractor.horizon": 20.0,
    "attractor.nbins": 64,
    "attractor.box_lower": [-3.0],
    "attractor.box_upper": [3.0],
    "lyapunov.horizon": 20.0,
    "lyapunov.paths": 4,
    "lyapunov.n_grid": [4, 8],
    "lyapunov.bins": 8,
    "verify.shifts": 1,
}

FAST_D = {
    "run.seed": 3,
    "model.name": "d",
    "run.stages": ["curves"],
    "attractor.horizon": 20.0,
    "attractor.grid": 2,
}


def write_yaml(path, flat):
    tree = {}
    for key, value in flat.items():
        node = tree
        *head, last = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    path.write_text(yaml.safe_dump(tree))
    return path


def test_defaults_fill_every_key():
    cfg = validate({})
    assert set(SCHEMA) <= set(cfg)
    assert cfg["attractor.nbins"] == 256 and cfg["attractor.tol_K"] is None


def test_unknown_key_and_bad_types():
    with pytest.raises(ConfigError) as info:
        validate({"attractor.horizn": 3.0})
    assert info.value.key == "attractor.horizn"
    with pytest.raises(ConfigError):
        validate({"attractor.nbins": 2.5})
    with pytest.raises(ConfigError):
        validate({"output.trajectory": "yes"})
    with pytest.raises(ConfigError):
        validate({"run.stages": ["simulate", "plot"]})
    with pytest.raises(ConfigError):
        validate({"attractor.box_lower": [0.0, 0.0]})
    with pytest.raises(ConfigError):
        validate({"model.param.sigma": [1, 2]})


def test_ints_promote_to_float():
    assert validate({"attractor.horizon": 30})["attractor.horizon"] == 30.0


def test_yaml_env_and_override_precedence(tmp_path):
    path = write_yaml(tmp_path / "c.yaml", {"attractor.horizon": 10.0, "run.seed": 1})
    env = {"RANDPERIODIC_ATTRACTOR__HORIZON": "30", "RANDPERIODIC_ATTRACTOR__TOL_K": "0.01", "HOME": "/"}
    cfg = load_config(path, environ=env)
    assert cfg["attractor.horizon"] == 30.0 and cfg["attractor.tol_K"] == 0.01 and cfg["run.seed"] == 1
    cfg = load_config(path, {"attractor.horizon": 40.0}, environ=env)
    assert cfg["attractor.horizon"] == 40.0
    assert env_overrides({"OTHER": "1"}) == {}


def test_bad_config_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_model_params():
    cfg = validate({"model.param.rate": 2, "model.param.interpretation": "ito", "model.steps_per_period": 16})
    assert model_params(cfg) == {"rate": 2, "interpretation": "ito", "steps_per_period": 16}


@pytest.fixture(scope="module")
def run_a(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    return out, run_pipeline(FAST_A, out)


def test_pipeline_on_forced_linear(run_a):
    out, man = run_a
    assert man.passed and not man.crashed
    assert man.completed == ["simulate", "attractor", "lyapunov", "curves", "verify"]
    assert man.results["curves"]["n"] == 1 and man.results["curves"]["periods"] == [1]
    assert man.resolved["attractor.tol_K"] == pytest.approx(6e-3)
    assert man.resolved["verify.tol_period"] == pytest.approx(3e-2)
    assert man.resolved["lyapunov.lambda"] == 0.5
    assert man.results["verify"]["smallest_passing_k"] == 1
    # no hidden defaults: every resolved threshold is recorded
    for key in ("curves.gap", "curves.jump_threshold", "curves.tol_match"):
        assert man.resolved[key] > 0


def test_verify_reports_smallest_passing_k(tmp_path):
    cfg = {**FAST_A, "run.stages": ["verify"], "verify.k": 2, "verify.shifts": 1}
    man = run_pipeline(cfg, tmp_path)
    body = json.loads((Path(man.run_dir) / "verify.json").read_text())
    assert body["k"] == 2 and body["shifts"] == [1, 2, 3]
    assert body["smallest_passing_k"] == 1 and body["pass"]


def test_run_directory_contents(run_a):
    out, man = run_a
    run_dir = Path(man.run_dir)
    assert run_dir.name.startswith("run-")
    names = {p.name for p in run_dir.iterdir()}
    assert {"manifest.json", "cloud.csv", "curves.csv", "attractor.json", "curves.json", "verify.json"} <= names
    assert "trajectory.csv" not in names
    head = (run_dir / "cloud.csv").read_text().splitlines()[0]
    assert head == f"# schema_version=1 manifest_hash={man.hash}"
    body = json.loads((run_dir / "verify.json").read_text())
    assert body["manifest_hash"] == man.hash and body["schema_version"] == 1
    assert set(man.outputs) == names - {"manifest.json"}


def test_manifest_roundtrip(run_a):
    _, man = run_a
    back = RunManifest.load(Path(man.run_dir) / "manifest.json")
    assert back.hash == man.hash and back.outputs == man.outputs and back.passed


def test_vacuous_bound_is_noted(tmp_path):
    cfg = {**FAST_A, "run.stages": ["lyapunov"], "lyapunov.lambda_prime": 0.1}
    man = run_pipeline(cfg, tmp_path)
    lyap = json.loads((Path(man.run_dir) / "lyapunov.json").read_text())
    assert lyap["semiuniform"]["vacuous"] and lyap["semiuniform"]["notes"]


def test_runs_are_append_only(tmp_path):
    cfg = {**FAST_A, "run.stages": ["simulate"]}
    first = run_pipeline(cfg, tmp_path)
    text = (Path(first.run_dir) / "simulate.json").read_text()
    second = run_pipeline(cfg, tmp_path)
    assert Path(first.run_dir).name == "run-001" and Path(second.run_dir).name == "run-002"
    assert (Path(first.run_dir) / "simulate.json").read_text() == text
    assert first.hash == second.hash


def test_workers_do_not_change_outputs(run_a, tmp_path):
    _, man = run_a
    par = run_pipeline({**FAST_A, "run.workers": 2}, tmp_path)
    assert par.hash == man.hash
    assert par.outputs == man.outputs


def test_compare_same_config_is_empty(run_a, tmp_path):
    _, man = run_a
    again = run_pipeline(FAST_A, tmp_path)
    assert compare_runs(man, again) == {}


def test_compare_seeds_agree_on_exponents(tmp_path):
    cfg = {"model.name": "b", "run.stages": ["lyapunov"], "lyapunov.horizon": 100.0, "lyapunov.n_grid": [4, 8]}
    a = run_pipeline({**cfg, "run.seed": 1}, tmp_path)
    b = run_pipeline({**cfg, "run.seed": 2}, tmp_path)
    assert a.results["lyapunov"]["exponents"] != b.results["lyapunov"]["exponents"]
    assert "exponents" not in compare_runs(a, b)


def test_cli_exit_codes(tmp_path):
    out = tmp_path / "runs"
    good = write_yaml(tmp_path / "a.yaml", FAST_A)
    assert main(["pipeline", "--config", str(good), "--out", str(out)]) == 0

    failing = write_yaml(tmp_path / "fail.yaml", {**FAST_A, "run.stages": ["lyapunov"], "lyapunov.lambda_prime": -1.5})
    assert main(["lyapunov", "--config", str(failing), "--out", str(out)]) == 1

    unknown = write_yaml(tmp_path / "bad.yaml", {**FAST_A, "attractor.horizn": 1.0})
    assert main(["pipeline", "--config", str(unknown), "--out", str(out)]) == 2

    blowup = write_yaml(tmp_path / "e.yaml", {
        "model.name": "e", "attractor.box_lower": [-1.0, -1.0], "attractor.box_upper": [1.0, 1.0],
        "attractor.nbins": 8,
    })
    assert main(["attractor", "--config", str(blowup), "--out", str(out)]) == 3
    # the config error stopped before creating a run directory
    assert sorted(p.name for p in out.iterdir()) == ["run-001", "run-002", "run-003"]
    crashed = RunManifest.load(out / "run-003" / "manifest.json")
    assert crashed.crashed and crashed.failed_stage == "attractor"


def test_cli_env_override_error(tmp_path, monkeypatch):
    monkeypatch.setenv("RANDPERIODIC_ATTRACTOR__NBINS", "many")
    assert main(["attractor", "--out", str(tmp_path)]) == 2


def test_cli_replay_and_compare(tmp_path, capsys):
    out = tmp_path / "runs"
    a = write_yaml(tmp_path / "a.yaml", {**FAST_A, "run.stages": ["curves"]})
    d = write_yaml(tmp_path / "d.yaml", FAST_D)
    assert main(["pipeline", "--config", str(a), "--out", str(out)]) == 0
    assert main(["pipeline", "--config", str(d), "--out", str(out)]) == 0
    man_a, man_d = out / "run-001" / "manifest.json", out / "run-002" / "manifest.json"
    capsys.readouterr()
    assert main(["pipeline", "--replay", str(man_a), "--out", str(out)]) == 0
    assert "DIFFERS" not in capsys.readouterr().out
    assert main(["compare", str(man_a), str(man_a)]) == 0
    capsys.readouterr()
    assert main(["compare", str(man_a), str(man_d)]) == 1
    assert json.loads(capsys.readouterr().out)["periods"] == [[1], [2]]
    assert main(["compare", str(man_a), str(tmp_path / "none.json")]) == 2
