import csv
import json
import re

import pytest

from netloc.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main

SMALL = {
    "scenario": {"n": 10, "bounds": [30, 30, 5]},
    "noise": {"profile": "noiseless"},
    "pipeline": {"tilt_noise": 0.0},
}


def write_config(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_generate_writes_ten_poses_by_default(tmp_path):
    out = tmp_path / "s.json"
    assert main(["generate", "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert len(doc["nodes"]) == 10
    assert doc["seed"] == 0


def test_generate_is_byte_identical_for_same_seed(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["generate", "--seed", "7", "--out", str(a)]) == EXIT_OK
    assert main(["generate", "--seed", "7", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_bad_anchor_fraction_exits_2_naming_field(tmp_path, capsys):
    cfg = write_config(tmp_path, {"scenario": {"anchor_fraction": 1.5}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "s.json")]) == EXIT_CONFIG
    assert "anchor_fraction" in capsys.readouterr().err
    assert not (tmp_path / "s.json").exists()


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"solver": {"max_iters_typo": 3}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "s.json")]) == EXIT_CONFIG
    assert "solver.max_iters_typo" in capsys.readouterr().err


def test_unknown_experiment_exits_2(tmp_path, capsys):
    assert main(["experiment", "nope", "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "nope" in err and "registration" in err


def test_solve_noiseless_is_exact(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    s, r = tmp_path / "s.json", tmp_path / "r.json"
    assert main(["generate", "--config", cfg, "--out", str(s)]) == EXIT_OK
    assert main(["solve", str(s), "--config", cfg, "--out", str(r)]) == EXIT_OK
    doc = json.loads(r.read_text())
    assert doc["status"] == "ok"
    assert doc["summary"]["median_3d"] < 1e-6
    assert {"config", "seed", "summary", "solver", "edges", "rigidity", "poses", "events"} <= set(doc)
    assert len(doc["poses"]) == 10


def test_solve_default_noise_fifty_nodes_reports_all_sections(tmp_path):
    s, r = tmp_path / "s.json", tmp_path / "r.json"
    assert main(["generate", "--n", "50", "--out", str(s)]) == EXIT_OK
    assert main(["solve", str(s), "--out", str(r)]) == EXIT_OK
    doc = json.loads(r.read_text())
    assert doc["status"] in ("ok", "not_converged")
    assert len(doc["poses"]) == 50
    assert doc["rigidity"]["rigid"] is True
    assert doc["summary"]["median_3d"] >= 0


def test_non_rigid_tree_logs_decomposition_before_solve(tmp_path, capsys):
    doc = {
        "scenario": {"n": 12, "bounds": [30, 30, 5], "fov": 1.5},
        "noise": {"profile": "noiseless"},
        "pipeline": {"edges_per_node": 0, "tilt_noise": 0.0},
    }
    cfg = write_config(tmp_path, doc)
    s, r = tmp_path / "s.json", tmp_path / "r.json"
    assert main(["generate", "--config", cfg, "--out", str(s)]) == EXIT_OK
    capsys.readouterr()
    assert main(["solve", str(s), "--config", cfg, "--out", str(r)]) == EXIT_OK
    events = re.findall(r"event=\w+", capsys.readouterr().err)
    assert "event=decomposition" in events
    assert "event=critical_edge_added" in events
    assert events.index("event=critical_edge_added") < events.index("event=solve")
    assert json.loads(r.read_text())["rigidity"]["rigid"] is True


def test_out_dir_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("NETLOC_OUT_DIR", str(tmp_path))
    assert main(["generate"]) == EXIT_OK
    assert (tmp_path / "scenario.json").exists()


def test_unwritable_output_exits_4(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate", "--out", str(blocker / "sub" / "s.json")]) == EXIT_IO


def test_missing_scenario_exits_4(tmp_path):
    assert main(["solve", str(tmp_path / "absent.json"), "--out", str(tmp_path / "r.json")]) == EXIT_IO


def read_table(path):
    lines = path.read_text().splitlines()
    header = [l for l in lines if l.startswith("#")]
    rows = list(csv.DictReader(l for l in lines if not l.startswith("#")))
    return header, rows


def test_registration_table_is_monotone(tmp_path):
    cfg = write_config(tmp_path, {"experiment": {"trials": 10}})
    out = tmp_path / "reg.csv"
    assert main(["experiment", "registration", "--config", cfg, "--out", str(out)]) == EXIT_OK
    header, rows = read_table(out)
    assert header[0].startswith("# config=") and header[1].startswith("# seed=")
    frac = [float(r["registered_fraction"]) for r in rows]
    assert all(a >= b for a, b in zip(frac, frac[1:]))
    assert set(rows[0]) == {"threshold", "registered_fraction", "false_positives", "trials"}


@pytest.mark.parametrize("name,cols", [
    ("edges_sweep", {"seed", "mode", "edges", "median_3d", "p90_3d", "rigid", "dof", "latency_s"}),
    ("anchor_sweep", {"seed", "anchors", "mode", "median_3d", "p90_3d", "median_2d"}),
])
def test_experiment_tables_have_documented_columns(tmp_path, name, cols):
    doc = dict(SMALL, experiment={"edge_counts": [9, 18], "anchor_counts": [0, 3]})
    cfg = write_config(tmp_path, doc)
    out = tmp_path / f"{name}.csv"
    assert main(["experiment", name, "--config", cfg, "--out", str(out)]) == EXIT_OK
    header, rows = read_table(out)
    assert len(header) == 2
    assert set(rows[0]) == cols
    assert len(rows) == (4 if name == "edges_sweep" else 2)


def test_threads_do_not_change_tables(tmp_path):
    doc = dict(SMALL, experiment={"seeds": [0, 1, 2], "anchor_counts": [3]})
    cfg = write_config(tmp_path, doc)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["experiment", "anchor_sweep", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["experiment", "anchor_sweep", "--config", cfg, "--threads", "3", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
