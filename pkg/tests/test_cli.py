import json

import numpy as np
import pytest

from confound_ope.behavior_fit import TabularBehavior, save_policy
from confound_ope.cli import ExperimentConfig, main


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_toy(capsys):
    code, out, _ = run(["toy", "--gamma", 4, "--horizon", 2], capsys)
    assert code == 0
    assert "p_y1=2/9" in out and "p_y0=1/18" in out and "ratio=4" in out


def test_generate_fit_bound_validate(tmp_path, capsys):
    data, beh, res = tmp_path / "s.jsonl", tmp_path / "b.json", tmp_path / "r.json"
    assert run(["sepsis", "gen", "--gamma-star", 2, "--n", 3000, "--seed", 1, "--out", data], capsys)[0] == 0
    assert run(["fit-behavior", "--data", data, "--out", beh], capsys)[0] == 0
    code, _, _ = run(["bound", "--data", data, "--behavior", beh, "--scenario", "sepsis",
                      "--gamma", 2, "--out", res], capsys)
    assert code == 0
    result = json.loads(res.read_text())
    assert set(result) == {"WO", "W", "optimal"}
    for v in result.values():
        assert v["final"]["lower"] <= v["final"]["point_IS"] <= v["final"]["upper"]
    code, out, _ = run(["validate", data], capsys)
    assert code == 0 and out.startswith("OK, 3000 episodes, T=5")


def test_autism_pipeline(tmp_path, capsys):
    data, beh = tmp_path / "a.jsonl", tmp_path / "b.json"
    assert run(["autism", "gen", "--preset", "case1", "--n", 2000, "--out", data], capsys)[0] == 0
    assert run(["fit-behavior", "--data", data, "--kind", "logistic", "--strata", "autism",
                "--out", beh], capsys)[0] == 0
    code, out, _ = run(["bound", "--data", data, "--behavior", beh, "--scenario", "autism",
                        "--preset", "case1", "--gamma", 2, "--t-star", 2], capsys)
    assert code == 0 and "adaptive" in json.loads(out)


def test_validate_reports_truncated_line(tmp_path, capsys):
    data = tmp_path / "s.jsonl"
    run(["sepsis", "gen", "--n", 5, "--out", data], capsys)
    lines = data.read_text().splitlines()
    lines[3] = lines[3][:10]
    data.write_text("\n".join(lines) + "\n")
    code, out, _ = run(["validate", data], capsys)
    assert code == 2 and "line 4" in out


def test_validate_warns_on_zero_probability(tmp_path, capsys):
    data, beh = tmp_path / "s.jsonl", tmp_path / "b.json"
    run(["sepsis", "gen", "--n", 200, "--out", data], capsys)
    tables = np.zeros((5, 1442, 8))
    tables[..., 7] = 1.0
    save_policy(TabularBehavior(tables, tuple((t,) for t in range(5)), p_min=0.0), beh)
    code, out, _ = run(["validate", data, "--behavior", beh], capsys)
    assert code == 0 and "zero behavior probability" in out


def test_config_errors_exit_2(tmp_path, capsys):
    assert run(["sweep", "--scenario", "nope", "--out", tmp_path / "x.csv"], capsys)[0] == 2
    assert run(["sweep", "--gamma-grid", "0.5:2:0.5", "--out", tmp_path / "x.csv"], capsys)[0] == 2
    assert run(["run", "--n", 0], capsys)[0] == 2
    assert run(["bound", "--data", tmp_path / "missing.jsonl", "--behavior", "x", "--gamma", 2],
               capsys)[0] == 2
    assert run(["frobnicate"], capsys)[0] == 2
    cfg = tmp_path / "c.toml"
    cfg.write_text('[experiment]\nscenario = "sepsis"\nbogus = 1\n')
    assert run(["run", "--config", cfg], capsys)[0] == 2


def test_estimation_error_exit_3(tmp_path, capsys):
    data, beh = tmp_path / "s.jsonl", tmp_path / "b.json"
    run(["sepsis", "gen", "--n", 200, "--out", data], capsys)
    tables = np.zeros((5, 1442, 8))
    tables[..., 7] = 1.0
    save_policy(TabularBehavior(tables, tuple((t,) for t in range(5)), p_min=0.0), beh)
    code, _, err = run(["bound", "--data", data, "--behavior", beh, "--scenario", "sepsis",
                        "--gamma", 2], capsys)
    assert code == 3 and "estimation error" in err


def test_run_writes_artifacts_and_is_reproducible(tmp_path, capsys):
    args = ["run", "--scenario", "sepsis", "--n", 2000, "--gamma-grid", "1:3:1",
            "--replications", 2, "--seed", 5]
    assert run(args + ["--out-dir", tmp_path / "a"], capsys)[0] == 0
    assert run(args + ["--out-dir", tmp_path / "b", "--workers", 2], capsys)[0] == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["behavior.json", "bounds.json", "design_sensitivity.json", "manifest.json",
                     "sweep.csv", "sweep_naive.csv"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 5 and len(manifest["config_hash"]) == 64


def test_run_toy(tmp_path, capsys):
    code, out, _ = run(["run", "--scenario", "toy", "--gamma", 4, "--horizon", 2,
                        "--out-dir", tmp_path], capsys)
    assert code == 0 and "p_y1=2/9" in out
    assert json.loads((tmp_path / "toy.json").read_text())["ratio"] == "4"


def test_config_file_with_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[experiment]\nscenario = "sepsis"\nn = 1500\ngamma_grid = [1.0, 2.0]\n')
    out_csv = tmp_path / "s.csv"
    code, out, _ = run(["sweep", "--config", cfg, "--n", 1200, "--out", out_csv,
                        "--compare", "W,WO"], capsys)
    assert code == 0 and "design sensitivity (final)" in out
    assert len(out_csv.read_text().splitlines()) == 1 + 2 * 3


def test_external_scenario(tmp_path, capsys):
    data, ev = tmp_path / "s.jsonl", tmp_path / "uniform.json"
    run(["sepsis", "gen", "--n", 3000, "--out", data], capsys)
    tables = np.full((5, 1442, 8), 1 / 8)
    save_policy(TabularBehavior(tables, tuple((t,) for t in range(5)), p_min=0.0), ev)
    code, _, _ = run(["run", "--scenario", "external", "--data", data, "--evaluation", ev,
                      "--gamma-grid", "1,2", "--out-dir", tmp_path / "o"], capsys)
    assert code == 0
    assert "uniform" in json.loads((tmp_path / "o" / "bounds.json").read_text())


def test_config_hash_ignores_output_location():
    a = ExperimentConfig(out_dir="x", workers=1)
    b = ExperimentConfig(out_dir="y", workers=4)
    assert a.digest() == b.digest()
    assert a.digest() != ExperimentConfig(seed=1).digest()


def test_sepsis_gen_writes_oracle_values(tmp_path, capsys):
    data = tmp_path / "s.jsonl"
    run(["sepsis", "gen", "--n", 10, "--out", data], capsys)
    oracle = json.loads((tmp_path / "s.oracle.json").read_text())
    assert set(oracle["values"]) >= {"WO", "W", "optimal"}
    assert oracle["values"]["optimal"] >= oracle["values"]["W"]


def test_sepsis_mdp_dump_round_trips(tmp_path, capsys):
    from confound_ope.sepsis_sim import SepsisSimulator
    from confound_ope.tabular_mdp import TabularMDP, exact_policy_value

    path = tmp_path / "mdp.json"
    assert run(["sepsis", "mdp", "--out", path], capsys)[0] == 0
    sim = SepsisSimulator()
    loaded = TabularMDP.load(path)
    assert exact_policy_value(loaded, sim.optimal) == pytest.approx(exact_policy_value(sim.mdp, sim.optimal))
