from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from probe_lab.cli import (
    EXIT_CONFIG, EXIT_OK, EXIT_VIOLATION, ExperimentConfig, main, render_csv, strip_timestamp,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _write(tmp_path, cfg: dict, name="cfg.json") -> str:
    path = tmp_path / name
    path.write_text(json.dumps({"schema_version": 1, **cfg}))
    return str(path)


def _run(tmp_path, command, cfg, *extra) -> int:
    return main([command, "--config", _write(tmp_path, cfg), "--out", str(tmp_path / "out"), *extra])


def _rows(tmp_path, name):
    with open(tmp_path / "out" / f"{name}.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def _summary(tmp_path, name):
    return json.loads((tmp_path / "out" / f"{name}.json").read_text())


def test_verify_nonadaptive_ok_and_mock(tmp_path):
    cfg = {"command": "verify-nonadaptive", "trials": 10,
           "params": {"sketches": [{"name": "count_median", "n": 64, "d": 3, "b": 4}]}}
    assert _run(tmp_path, "verify-nonadaptive", cfg) == EXIT_OK
    assert _rows(tmp_path, "verify-nonadaptive")[0]["violations"] == "0"
    cfg["params"]["include_mock"] = True
    assert _run(tmp_path, "verify-nonadaptive", cfg) == EXIT_VIOLATION
    rows = _rows(tmp_path, "verify-nonadaptive")
    assert rows[1]["sketch"] == "adaptive_mock" and rows[1]["offenders"]


def test_verify_with_no_sketches(tmp_path):
    assert _run(tmp_path, "verify-nonadaptive", {"command": "verify-nonadaptive", "params": {}}) == EXIT_OK
    assert _rows(tmp_path, "verify-nonadaptive") == []


def test_run_game_writes_trials_and_summary(tmp_path):
    cfg = {"command": "run-game", "trials": 4, "master_seed": 3,
           "params": {"game": {"n": 64, "a": 3, "C": 10, "problem": "heavy_hitter"}}}
    assert _run(tmp_path, "run-game", cfg) == EXIT_OK
    rows = _rows(tmp_path, "run-game")
    assert len(rows) == 4 and all(r["success"] == "True" for r in rows)
    doc = _summary(tmp_path, "run-game")
    assert doc["summary"]["success_rate"] == 1.0
    assert rows[0]["config_hash"] == doc["config_hash"]
    assert doc["config"]["params"] == cfg["params"]
    assert "generated_at" in doc


def test_run_game_config_errors(tmp_path):
    bad = {"command": "run-game", "params": {"game": {"n": 1024, "a": 8, "C": 2, "problem": "entropy"}}}
    assert _run(tmp_path, "run-game", bad) == EXIT_CONFIG
    clash = {"command": "run-game", "params": {"game": {"n": 64, "a": 2, "C": 10, "problem": "point_query",
                                                        "trials": 3}}}
    assert _run(tmp_path, "run-game", clash) == EXIT_CONFIG
    wrong = {"command": "sweep", "params": {}}
    assert _run(tmp_path, "run-game", wrong) == EXIT_CONFIG
    assert main(["run-game", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


def test_schema_version_required(tmp_path):
    path = tmp_path / "v.json"
    path.write_text(json.dumps({"command": "run-game", "params": {}}))
    assert main(["run-game", "--config", str(path)]) == EXIT_CONFIG


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = {"command": "run-game", "trials": 2, "master_seed": 1,
           "params": {"game": {"n": 64, "a": 2, "C": 10, "problem": "point_query"}}}
    monkeypatch.setenv("PROBE_LAB_SEED", "77")
    _run(tmp_path, "run-game", cfg)
    assert _summary(tmp_path, "run-game")["config"]["master_seed"] == 77
    _run(tmp_path, "run-game", cfg, "--seed", "5", "--trials", "3")
    doc = _summary(tmp_path, "run-game")
    assert doc["config"]["master_seed"] == 5 and doc["config"]["trials"] == 3


def test_compress_demo_flags_unmet_preconditions(tmp_path):
    cfg = {"command": "compress-demo", "trials": 5, "params": {"identity_first": True, "games": [
        {"n": 2, "a": 1, "C": 10, "M": 1000, "problem": "point_query", "sketch": {"name": "exact", "n": 2}}]}}
    assert _run(tmp_path, "compress-demo", cfg) == EXIT_OK
    game = _summary(tmp_path, "compress-demo")["summary"]["games"][0]
    assert game["equality_rate"] == 1.0
    assert game["bound_column"] == "precondition unmet"


def test_cell_sample_command(tmp_path):
    cfg = {"command": "cell-sample", "params": {"sketches": [{"name": "stable_l1", "n": 128, "d": 3}]}}
    assert _run(tmp_path, "cell-sample", cfg) == EXIT_OK
    row = _rows(tmp_path, "cell-sample")[0]
    assert row["covered"] == "128" and row["certificate_ok"] == "True"


def test_bounds_report_empty_sweep_has_header_only(tmp_path):
    cfg = {"command": "bounds-report", "params": {"sketches": [], "trend_exponents": []}}
    assert _run(tmp_path, "bounds-report", cfg) == EXIT_OK
    text = (tmp_path / "out" / "bounds-report.csv").read_text()
    assert text.splitlines() == ["sketch,n,S_measured,t_u_measured,det_bound,rand_bound,preconditions_met,delta,"
                                 "config_hash"]


def test_bounds_report_dyadic_consistency(tmp_path):
    cfg = {"command": "bounds-report",
           "params": {"sketches": [{"name": "dyadic_hh", "n": 2**20, "d": 1, "b": 20}], "deltas": [0.01]}}
    assert _run(tmp_path, "bounds-report", cfg) == EXIT_OK
    row = _rows(tmp_path, "bounds-report")[0]
    assert int(row["S_measured"]) == 400  # Theta(lg^2 n)
    assert int(row["t_u_measured"]) >= int(row["det_bound"])
    trends = _summary(tmp_path, "bounds-report")["summary"]["trends"]
    assert trends["log"]["ok"] and trends["loglog"]["ok"]


def test_sweep_command(tmp_path):
    cfg = {"command": "sweep", "trials": 3, "params": {
        "game": {"n": 64, "a": 2, "C": 10, "problem": "point_query"}, "vary": {"C": [10, 100], "a": [1, 2]}}}
    assert _run(tmp_path, "sweep", cfg) == EXIT_OK
    rows = _rows(tmp_path, "sweep")
    assert [(r["C"], r["a"]) for r in rows] == [("10", "1"), ("10", "2"), ("100", "1"), ("100", "2")]
    assert all(r["success_rate"] == "1.0" for r in rows)


def test_csv_quoting_follows_rfc4180():
    text = render_csv(["a", "b"], [{"a": 'say "hi"', "b": "x,y"}], "h")
    assert text == 'a,b,config_hash\r\n"say ""hi""","x,y",h\r\n'


def test_config_hash_ignores_nothing_but_is_stable():
    a = ExperimentConfig.from_dict({"schema_version": 1, "command": "sweep", "params": {"x": 1, "y": 2}})
    b = ExperimentConfig.from_dict({"schema_version": 1, "command": "sweep", "params": {"y": 2, "x": 1}})
    c = ExperimentConfig.from_dict({"schema_version": 1, "command": "sweep", "params": {"x": 1, "y": 3}})
    assert a.hash() == b.hash() != c.hash()


def test_shipped_configs_parse():
    names = sorted(p.name for p in CONFIGS.glob("*.json"))
    assert names
    for name in names:
        cfg = ExperimentConfig.from_dict(json.loads((CONFIGS / name).read_text()))
        assert cfg.schema_version == 1


def test_timestamp_is_the_only_volatile_field(tmp_path):
    cfg = {"command": "run-game", "trials": 2, "params": {"game": {"n": 64, "a": 2, "C": 10,
                                                                      "problem": "point_query"}}}
    _run(tmp_path, "run-game", cfg)
    first = (tmp_path / "out" / "run-game.json").read_text()
    _run(tmp_path, "run-game", cfg)
    second = (tmp_path / "out" / "run-game.json").read_text()
    assert strip_timestamp(first) == strip_timestamp(second)
