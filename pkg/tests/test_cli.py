import json
import subprocess
import sys

import pytest

from fairfed.cli import main

BASE = {"dataset": "compas", "partition": {"K": 3, "alpha": 0.5}, "rounds": 2, "seeds": 2,
        "train": {"lr": 0.05, "epochs": 1}}


def write(path, obj):
    path.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return str(path)


def test_prepare_builtin_compas(tmp_path, capsys):
    assert main(["prepare", "compas", "--out", str(tmp_path)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["privileged"] == ["Caucasian"]
    assert report["train"]["n"] + report["test"]["n"] == 6172
    assert 0 < report["train"]["privileged_share"] < 1
    assert list((tmp_path / "cache").glob("compas-*.census.json"))


def test_prepare_adult_has_two_groups(tmp_path, capsys):
    assert main(["prepare", "adult", "--out", str(tmp_path)]) == 0
    train = json.loads(capsys.readouterr().out)["train"]
    assert train["privileged_share"] > 0 and train["unprivileged_share"] > 0


def test_prepare_csv_with_schema(tmp_path, capsys):
    rows = ["x,grp,y"] + [f"{i % 7},{'m' if i % 3 else 'f'},{(i // 2) % 2}" for i in range(40)]
    csv = write(tmp_path / "d.csv", "\n".join(rows) + "\n")
    schema = write(tmp_path / "s.json", {
        "name": "toy", "columns": {"x": "feature-continuous", "grp": "sensitive", "y": "label"},
        "label": {"column": "y", "positive": ["1"]},
        "sensitive": {"column": "grp", "privileged": ["m"]}})
    assert main(["prepare", csv, "--schema", schema, "--out", str(tmp_path / "o")]) == 0
    assert json.loads(capsys.readouterr().out)["dataset"] == "toy"


@pytest.mark.parametrize("schema", ["{broken", json.dumps({"name": "x", "columns": {}})])
def test_prepare_malformed_schema_fails(tmp_path, capsys, schema):
    csv = write(tmp_path / "d.csv", "a,b\n1,2\n")
    bad = write(tmp_path / "s.json", schema)
    code = main(["prepare", csv, "--schema", bad, "--out", str(tmp_path)])
    assert code != 0
    assert capsys.readouterr().err.startswith("error:")


def test_prepare_unknown_dataset(tmp_path, capsys):
    assert main(["prepare", "mnist", "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_run_caches_then_forces(tmp_path, capsys):
    config = write(tmp_path / "c.json", BASE)
    out = str(tmp_path / "out")
    assert main(["run", config, "--out", out]) == 0
    first = capsys.readouterr().out
    assert " done:" in first
    assert main(["run", config, "--out", out]) == 0
    assert "skipped (cached)" in capsys.readouterr().out
    assert main(["run", config, "--out", out, "--force"]) == 0
    again = capsys.readouterr().out
    assert " done:" in again
    assert again.splitlines()[1] == first.splitlines()[1]


def test_run_rejects_bad_config(tmp_path, capsys):
    assert main(["run", write(tmp_path / "c.json", {**BASE, "beta": -1}),
                 "--out", str(tmp_path)]) == 2
    assert "beta" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2


def test_run_resolves_relative_csv(tmp_path, capsys):
    rows = ["x,grp,y"] + [f"{i % 7},{'m' if i % 3 else 'f'},{(i // 2) % 2}" for i in range(200)]
    write(tmp_path / "d.csv", "\n".join(rows) + "\n")
    write(tmp_path / "s.json", {
        "name": "toy", "columns": {"x": "feature-continuous", "grp": "sensitive", "y": "label"},
        "label": {"column": "y", "positive": ["1"]},
        "sensitive": {"column": "grp", "privileged": ["m"]}})
    config = write(tmp_path / "c.json", {**BASE, "dataset": "d.csv", "schema": "s.json",
                                         "partition": {"K": 2, "alpha": 5.0}})
    assert main(["run", config, "--out", str(tmp_path / "o")]) == 0


def test_sweep_then_report(tmp_path, capsys):
    spec = write(tmp_path / "s.json", {"name": "cli", "base": BASE,
                                      "grid": {"method": ["fedavg", "fairfed-rw"],
                                               "alpha": [0.5, 5.0]}})
    out = str(tmp_path / "out")
    assert main(["sweep", spec, "--out", out, "--workers", "2"]) == 0
    assert "4 cells" in capsys.readouterr().out
    assert main(["report", out]) == 0
    text = capsys.readouterr().out
    assert "#### EOD" in text and "fairfed-rw" in text
    assert (tmp_path / "out" / "report" / "report.md").exists()


def test_sweep_with_failed_cell_exits_nonzero(tmp_path, capsys):
    spec = write(tmp_path / "s.json", {"name": "bad", "base": BASE,
                                      "grid": {"alpha": [0.5, 1e-6]}})
    assert main(["sweep", spec, "--out", str(tmp_path)]) == 1
    assert "1 cell(s) failed" in capsys.readouterr().err


def test_report_without_runs(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "no runs found" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fairfed.cli", "--help"],
                          capture_output=True, text=True, check=True)
    for command in ("prepare", "run", "sweep", "report"):
        assert command in proc.stdout
