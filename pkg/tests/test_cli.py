import csv
import json
from math import sqrt

import pytest

from khess.cli import main
from khess.grid import read_field


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    return main([*argv, "--out", str(out)]), out


def load(out, stem):
    return json.loads((out / f"{stem}.json").read_text())


def rows(out, stem):
    with open(out / f"{stem}.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_verify_lemmas_example(tmp_path):
    code, out = run(tmp_path, "verify-lemmas", "--n", "3", "--k", "2", "--l", "1",
                    "--samples", "10000", "--seed", "7")
    assert code == 0
    doc = load(out, "verify-lemmas-7")
    assert doc["seed"] == 7
    assert doc["report"]["violations"] == 0
    names = {s["name"] for s in doc["report"]["suites"]}
    assert {"concavity", "weighted-concavity", "shifted-second-derivative"} <= names


def test_reports_are_byte_identical(tmp_path, monkeypatch):
    argv = ["verify-lemmas", "--n", "4", "--k", "3", "--l", "1", "--samples", "500", "--seed", "3"]
    monkeypatch.setenv("KHESS_THREADS", "1")
    assert run(tmp_path, *argv, name="a")[0] == 0
    monkeypatch.setenv("KHESS_THREADS", "4")
    assert run(tmp_path, *argv, name="b")[0] == 0
    for suffix in ("json", "csv", "schema.json"):
        a = (tmp_path / "a" / f"verify-lemmas-3.{suffix}").read_bytes()
        b = (tmp_path / "b" / f"verify-lemmas-3.{suffix}").read_bytes()
        assert a == b
    other, out = run(tmp_path, *argv[:-1], "4", name="c")
    assert (out / "verify-lemmas-4.json").read_bytes() != \
        (tmp_path / "a" / "verify-lemmas-3.json").read_bytes()


def test_oracle_radial_example(tmp_path):
    code, out = run(tmp_path, "oracle-radial", "--n", "3", "--k", "2", "--f", "1", "--R", "1")
    assert code == 0
    rep = load(out, "oracle-radial-0")["report"]
    assert rep["coefficient"] == pytest.approx(1 / sqrt(3), rel=1e-10)
    assert rep["relative_error"] <= 1e-10
    table = rows(out, "oracle-radial-0")
    assert len(table) == 201 and float(table[0]["u"]) == pytest.approx(-0.5 / sqrt(3))


def test_malformed_config_writes_nothing(tmp_path):
    bad = tmp_path / "bad.json"
    cases = ["{not json", json.dumps([1, 2]), json.dumps({"n": 2, "bogus": 1}),
             json.dumps({"command": "solve"}), json.dumps({"n": 9}),
             json.dumps({"samples": "many"}), json.dumps({"deltas": [0.5, 2.0]})]
    for i, text in enumerate(cases):
        bad.write_text(text)
        code, out = run(tmp_path, "verify-lemmas", "--config", str(bad), name=f"o{i}")
        assert code == 64, text
        assert not out.exists()


def test_usage_errors(tmp_path):
    assert run(tmp_path, "frobnicate")[0] == 64
    assert run(tmp_path, "solve", "--n", "4")[0] == 64
    assert run(tmp_path, "solve", "--f", "-1")[0] == 64
    assert run(tmp_path, "pogorelov", "--levels", "33,17")[0] == 64
    assert run(tmp_path, "rigidity", "--resolution", "64")[0] == 64
    assert run(tmp_path, "solve", "--resolution", "abc")[0] == 64
    assert not (tmp_path / "out").exists()


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"command": "verify-lemmas", "samples": 40, "seed": 5}))
    code, out = run(tmp_path, "verify-lemmas", "--config", str(cfg), "--samples", "60")
    assert code == 0
    doc = load(out, "verify-lemmas-5")
    assert doc["config"]["samples"] == 60
    assert all(s["samples"] == 60 for s in doc["report"]["suites"] if s["name"] != "restricted-growth")


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = main(["oracle-radial", "--out", str(blocker / "sub")])
    assert code == 74


def test_solve_writes_field(tmp_path):
    code, out = run(tmp_path, "solve", "--n", "2", "--k", "2", "--resolution", "17", "--seed", "1")
    assert code == 0
    doc = load(out, "solve-1")
    assert doc["report"]["solver"]["converged"]
    assert doc["report"]["shift_check"]["passed"]
    u = read_field(out / "solve-1.field")
    assert u.values.shape == (17, 17)
    assert u.values.max() <= 0
    assert len(rows(out, "solve-1")) == doc["report"]["solver"]["iterations"] + 1


def test_solve_nonconvergence_exit(tmp_path):
    code, out = run(tmp_path, "solve", "--resolution", "33", "--max-iter", "1")
    assert code == 2
    assert "error" in load(out, "solve-0")["report"]


def test_refinement_csv_has_one_row_per_level(tmp_path):
    code, out = run(tmp_path, "pogorelov", "--levels", "9,17,33,65", "--beta", "2",
                    "--no-laplacian")
    table = rows(out, "pogorelov-0")
    assert code in (0, 1)
    assert [r["resolution"] for r in table] == ["9", "17", "33", "65"]
    assert all(r["flag"] == "0" for r in table)
    schema = json.loads((out / "pogorelov-0.schema.json").read_text())
    assert set(schema["columns"]) == set(table[0])


def test_partial_scan_rows_are_flagged(tmp_path):
    # level 9 reaches the residual tolerance, level 129 cannot in double precision
    code, out = run(tmp_path, "pogorelov", "--levels", "9,129", "--beta", "2", "--tol", "1e-13")
    assert code == 2
    table = rows(out, "pogorelov-0")
    assert table and all(r["flag"] == "1" and r["resolution"] == "9" for r in table)
    assert all(rep["flagged"] for rep in load(out, "pogorelov-0")["report"]["reports"])


def test_rigidity_quadratic(tmp_path):
    code, out = run(tmp_path, "rigidity", "--candidate", "quadratic", "--resolution", "33")
    assert code == 0
    table = rows(out, "rigidity-0")
    assert [float(r["R"]) for r in table] == [2.0, 4.0, 8.0, 16.0]
    assert all(float(r["osc"]) <= 1e-6 for r in table)
