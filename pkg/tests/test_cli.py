import csv
import json

import pytest

from ctmcsens.cli import (
    EXIT_CONFIG,
    EXIT_EXPLOSION,
    EXIT_INTERRUPTIVE,
    EXIT_OK,
    EXIT_TRUNCATION,
    main,
    reproduce,
    run_experiment,
)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_models_listing(capsys):
    code, out, _ = run(["models"], capsys)
    assert code == EXIT_OK
    assert "dimerization: species M, P, D; parameter sets set1, set2, flux" in out


def test_run_writes_reports(tmp_path, capsys):
    out = tmp_path / "o"
    code, text, _ = run(["run", "--model", "birth_death", "--method", "lr_cv", "--param", "2",
                         "--time", "5", "--paths", "2000", "--out", str(out)], capsys)
    assert code == EXIT_OK and "lr_cv" in text
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert len(rows) == 1 and rows[0]["param"] == "2" and rows[0]["param_name"] == "theta2"
    assert rows[0]["cpu_seconds"] == ""
    doc = json.loads((out / "report.json").read_text())
    assert doc["provenance"]["seed"] == 0
    assert doc["provenance"]["config"]["model"]["name"] == "birth_death"
    assert doc["rows"][0]["cpu_seconds"] is None


def test_report_reruns_byte_for_byte(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--model", "switch", "--method", "gs_hybrid", "--param", "1", "--time", "2",
                 "--paths", "2000", "--seed", "3", "--out", str(a)]) == EXIT_OK
    assert main(["run", "--config", str(a / "report.json"), "--out", str(b)]) == EXIT_OK
    capsys.readouterr()
    for name in ("report.csv", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_timing_records_cpu(tmp_path, capsys):
    code, _, _ = run(["run", "--model", "birth_death", "--method", "lr", "--paths", "200", "--timing",
                      "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    doc = json.loads((tmp_path / "report.json").read_text())
    assert all(r["cpu_seconds"] >= 0 for r in doc["rows"])


def test_environment_overrides_config(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": "birth_death", "method": "lr", "paths": 100, "seed": 1}))
    monkeypatch.setenv("CTMCSENS_SEED", "9")
    code, _, _ = run(["run", "--config", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_OK
    doc = json.loads((tmp_path / "o" / "report.json").read_text())
    assert doc["provenance"]["seed"] == 9
    code, _, _ = run(["run", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "p")], capsys)
    assert json.loads((tmp_path / "p" / "report.json").read_text())["provenance"]["seed"] == 4


def test_hybrid_diagnostics(tmp_path, capsys):
    code, text, _ = run(["run", "--model", "switch", "--method", "gs_hybrid", "--time", "2",
                         "--paths", "2000", "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK and "allocation:" in text and "% pathwise" in text
    diag = json.loads((tmp_path / "report.json").read_text())["diagnostics"]
    assert 0 < diag["pilot_pathwise_share"] < 1
    assert set(diag) >= {"divergence_fraction", "valid_fraction", "pilot_variances", "pilot_costs"}


def test_dump_paths(tmp_path, capsys):
    code, _, _ = run(["run", "--model", "switch", "--method", "lr", "--paths", "50", "--time", "2",
                      "--dump-paths", "3", "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "paths.csv")))
    assert rows[0] == ["path", "time", "A", "B", "C", "reaction"]
    assert {r[0] for r in rows[1:]} == {"0", "1", "2"}
    first = [r for r in rows[1:] if r[0] == "0"]
    assert first[0][2:5] == ["10", "0", "0"] and first[0][5] == ""
    assert all(r[5] in ("1", "2", "3") for r in first[1:])


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"model": "switch",\n "method": "cfd"}')
    code, _, err = run(["run", "--config", str(cfg)], capsys)
    assert code == EXIT_CONFIG
    assert "bad.json:1:" in err and "fd_step" in err


def test_unknown_model_exit_code(capsys):
    code, _, err = run(["run", "--model", "nope", "--method", "lr"], capsys)
    assert code == EXIT_CONFIG and "no builtin model" in err


def test_missing_method(capsys):
    code, _, err = run(["run", "--model", "switch"], capsys)
    assert code == EXIT_CONFIG and "--method" in err


def test_interruptive_exit_code(tmp_path, capsys):
    code, _, err = run(["run", "--model", "switch", "--method", "gs_hybrid", "--exempt", "1,2",
                        "--paths", "100", "--out", str(tmp_path)], capsys)
    assert code == EXIT_INTERRUPTIVE and "interruptive" in err


def test_explosion_exit_code(tmp_path, capsys):
    code, _, err = run(["run", "--model", "birth_death", "--method", "lr", "--paths", "10",
                        "--max-jumps", "5", "--out", str(tmp_path)], capsys)
    assert code == EXIT_EXPLOSION and "jump cap" in err


def test_truncation_exit_code(tmp_path, capsys):
    # two species annihilating each other at a slow rate: equilibrium counts near 10^4 each
    model = {
        "name": "annihilation", "species": ["A", "B"], "parameters": ["k1", "k2", "k3"],
        "reactions": [
            {"name": "a", "reactants": {}, "products": {"A": 1}, "kind": "mass_action", "rate": "k1"},
            {"name": "b", "reactants": {}, "products": {"B": 1}, "kind": "mass_action", "rate": "k2"},
            {"name": "ab", "reactants": {"A": 1, "B": 1}, "products": {}, "kind": "mass_action",
             "rate": "k3"},
        ],
        "observable": {"kind": "terminal", "species": "A"},
        "parameter_sets": {"default": {"theta": [5000.0, 5000.0, 1e-4],
                                       "initial_state": {"A": 0, "B": 0}, "time": 1.0}},
    }
    path = tmp_path / "m.json"
    path.write_text(json.dumps(model))
    code, _, err = run(["run", "--model", str(path), "--method", "oracle", "--param", "1",
                        "--out", str(tmp_path / "o")], capsys)
    assert code == EXIT_TRUNCATION and "infeasible" in err


def test_oracle_method(tmp_path, capsys):
    code, text, _ = run(["run", "--model", "switch", "--method", "oracle", "--param", "1",
                         "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK and "-6.3945" in text


def test_cfd_relative_step():
    rows, _ = run_experiment({"model": "birth_death", "method": "cfd", "params": [2], "fd_step": 0.01,
                              "paths": 3000, "time": 5.0})
    assert abs(rows[0].estimate + 28.508) < 3 * rows[0].halfwidth / 1.96
    assert "O(h^2)" in rows[0].bias_note


def test_pathwise_bias_note():
    rows, _ = run_experiment({"model": "switch", "method": "gs_pathwise", "params": [1], "paths": 500})
    assert "biased" in rows[0].bias_note


def test_reproduce_fig1_at_time_zero():
    rows = reproduce("fig1", scale=0.01, times=[0.0])
    assert {r["method"] for r in rows} == {"gs_pathwise", "gs_hybrid", "lr_cv", "cfd"}
    assert all(r["estimate"] == 0.0 and r["halfwidth"] == 0.0 and r["exact"] == 0.0 for r in rows)


def test_reproduce_command(tmp_path, capsys):
    code, text, _ = run(["reproduce", "fig4", "--times", "0.5", "--fraction", "0.2",
                         "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "fig4.csv")))
    assert {r["method"] for r in rows} == {"gs_hybrid", "rpd_hybrid", "lr_cv", "cfd"}


def test_unknown_exhibit():
    with pytest.raises(Exception):
        reproduce("fig9")
