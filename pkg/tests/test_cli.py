import csv
import json

import pytest

from nsos.cli import EXIT_GUARD, EXIT_INPUT, EXIT_OK, EXIT_UNSTABLE, bundled, main


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def manifest(tmp_path, command):
    return json.loads((tmp_path / f"{command}.manifest.json").read_text())


def test_analyze_defaults(tmp_path, capsys):
    assert run(tmp_path, "analyze") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["meets_slo"] is True
    summary = json.loads((tmp_path / "analyze_summary.json").read_text())
    assert summary["T"] <= summary["slo"]
    m = manifest(tmp_path, "analyze")
    assert m["command"] == "analyze" and m["tool_version"]
    assert str(tmp_path / "analyze.csv") in m["outputs"]


def test_dimension_sweep_with_bruteforce(tmp_path):
    assert run(tmp_path, "dimension", "--sweep", "3000,8000", "--brute-force") == EXIT_OK
    with open(tmp_path / "dimension.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["lambda"]) for r in rows] == [3000.0, 8000.0]
    for r in rows:
        assert r["total_cores"] == r["bf_total_cores"]
        assert r["feasible"] == "true"
    assert manifest(tmp_path, "dimension")["config"]["rates"] == [3000.0, 8000.0]


def test_dimension_json_format(tmp_path):
    assert run(tmp_path, "dimension", "--format", "json") == EXIT_OK
    rows = json.loads((tmp_path / "dimension.json").read_text())
    assert rows[0]["total_cores"] == sum(v for k, v in rows[0].items() if k.startswith("cores_"))


def test_bruteforce_guard_exit(tmp_path, capsys):
    code = run(tmp_path, "dimension", "--sweep", "20000", "--brute-force", "--max-checks", "2")
    assert code == EXIT_GUARD
    assert "estimated" in capsys.readouterr().err


def test_bad_json_reports_line(tmp_path, capsys):
    bad = tmp_path / "s.json"
    bad.write_text('{"domains": 1,\n "slo": }\n')
    assert run(tmp_path, "analyze", "--scenario", str(bad)) == EXIT_INPUT
    assert "line 2" in capsys.readouterr().err


def test_unknown_field_reported(tmp_path, capsys):
    bad = tmp_path / "s.json"
    bad.write_text(json.dumps({"domains": 1, "lamda": 5}))
    assert run(tmp_path, "analyze", "--scenario", str(bad)) == EXIT_INPUT
    assert "lamda" in capsys.readouterr().err


def test_missing_file(tmp_path):
    assert run(tmp_path, "analyze", "--scenario", str(tmp_path / "nope.json")) == EXIT_INPUT


def test_unstable_allocation_names_entity(tmp_path, capsys):
    alloc = tmp_path / "a.json"
    alloc.write_text(json.dumps({"GO": 1, "SAE": 1, "DSO_1": 2, "DSNFVO_1": 2, "DSVIM_1": 1,
                                 "DSRRO_1": 2, "DSeNBs_1": 1, "DSSDNC_1": 1}))
    assert run(tmp_path, "analyze", "--allocation", str(alloc)) == EXIT_UNSTABLE
    assert "GO" in capsys.readouterr().err


@pytest.mark.parametrize("payload", [{"GO": -1}, {"GO": 1.5}, {"XX": 1}, [1, 2]])
def test_bad_allocation(tmp_path, payload):
    alloc = tmp_path / "a.json"
    alloc.write_text(json.dumps(payload))
    assert run(tmp_path, "analyze", "--allocation", str(alloc)) == EXIT_INPUT


def test_simulate_writes_trace(tmp_path):
    code = run(tmp_path, "simulate", "--duration", "2", "--warmup", "0.2", "--trace",
               "--seed", "4")
    assert code == EXIT_OK
    with open(tmp_path / "simulate.csv") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["ci_low"]) <= float(row["mean_response"]) <= float(row["ci_high"])
    assert (tmp_path / "trace.csv").exists()
    assert manifest(tmp_path, "simulate")["seed"] == 4


def test_simulate_bad_config(tmp_path):
    assert run(tmp_path, "simulate", "--duration", "1", "--warmup", "2") == EXIT_INPUT


def test_complexity_small(tmp_path, capsys):
    code = run(tmp_path, "complexity", "--lambda-sweep", "2000,4000,8000",
               "--ndso-sweep", "1,2", "--runs", "1")
    assert code == EXIT_OK
    fits = json.loads((tmp_path / "complexity_fits.json").read_text())
    assert set(fits) == {"lambda", "ndso"}
    assert run(tmp_path, "complexity") == EXIT_INPUT


def test_drp_short_run(tmp_path):
    prof = tmp_path / "p.json"
    prof.write_text(json.dumps({"knots": [[0, 20], [600, 40], [1200, 40]], "step": 60}))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dt": 300, "boot_delay": 30, "monitor_window": 60}))
    code = run(tmp_path, "drp", "--scenario", str(bundled("scenario_desk.json")),
               "--profile", str(prof), "--drp-config", str(cfg), "--seed", "2")
    assert code == EXIT_OK
    with open(tmp_path / "drp.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert manifest(tmp_path, "drp")["config"]["drp"]["seed"] == 2


def test_drp_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dt": 10, "monitor_window": 60}))
    assert run(tmp_path, "drp", "--drp-config", str(cfg)) == EXIT_INPUT
    cfg.write_text(json.dumps({"dtt": 10}))
    assert run(tmp_path, "drp", "--drp-config", str(cfg)) == EXIT_INPUT
