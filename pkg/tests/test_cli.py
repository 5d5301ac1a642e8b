"""Command-line front end: runs, sweeps, references, comparisons and exit codes."""

import csv
import io
import math

import pytest

from adaptfv import metrics as M
from adaptfv.cli import main


@pytest.fixture(autouse=True)
def private_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("ADAPTFV_CACHE", str(tmp_path / "cache"))


def _rows(text):
    return list(csv.DictReader(io.StringIO(text.split("\n\n")[0])))


def test_fv_run_writes_report_and_snapshot(tmp_path, capsys):
    out = tmp_path / "o"
    out.mkdir()
    args = ["run", "--case", "lax_liu_6", "--method", "fv", "--level", "5", "--ref-level", "6", "--out", str(out)]
    assert main(args) == 0
    first = _rows(capsys.readouterr().out)
    assert len(first) == 1 and first[0]["method"] == "FV" and float(first[0]["l1_rho"]) > 0
    snap = sorted(out.glob("*.snap"))
    assert snap and (out / "lax_liu_6_fv_L5.csv").exists()
    data = snap[0].read_bytes()
    assert main(args) == 0
    second = _rows(capsys.readouterr().out)
    drop = ("wall_s",)
    assert {k: v for k, v in first[0].items() if k not in drop} == {k: v for k, v in second[0].items() if k not in drop}
    assert snap[0].read_bytes() == data


def test_mr_run_mesh_compression(capsys):
    assert main(["run", "--case", "lax_liu_6", "--method", "mr", "--level", "7", "--eps", "0.0023",
                 "--no-error"]) == 0
    (row,) = _rows(capsys.readouterr().out)
    M.validate_row(row)
    assert float(row["mesh_compression"]) < 0.60
    assert row["perturbation"] == "" and row["cpu_compression"] == ""


def test_adaptive_runs_write_structure_dumps(tmp_path, capsys):
    for method, ext in (("mr", "tree"), ("amr", "hier")):
        out = tmp_path / method
        out.mkdir()
        assert main(["run", "--case", "lax_liu_6", "--method", method, "--level", "5", "--no-error",
                     "--out", str(out), "--snapshot-every", "20"]) == 0
        assert list(out.glob(f"*.{ext}")) and len(list(out.glob("*mesh*.txt"))) >= 2


def test_unknown_case_exit_code(capsys):
    assert main(["run", "--case", "sod", "--method", "fv", "--level", "5"]) == 2
    assert "lax_liu_6" in capsys.readouterr().err


def test_threshold_family_mismatch_exit_code(capsys):
    assert main(["run", "--case", "lax_liu_6", "--method", "amr", "--level", "5", "--eps", "0.01"]) == 2


def test_numerical_failure_exit_code(capsys):
    assert main(["run", "--case", "lax_liu_6", "--method", "fv", "--level", "6", "--steps", "2",
                 "--no-error"]) == 3
    assert "location" in capsys.readouterr().err


def test_io_failure_exit_code(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "--case", "lax_liu_6", "--method", "fv", "--level", "4", "--no-error",
                 "--out", str(blocker / "sub")]) == 4
    assert main(["compare", str(tmp_path / "missing.snap"), str(tmp_path / "missing.snap")]) == 4


def test_config_file_with_overrides(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\ncase = lax_liu_6\nmethod = fv\nlevel = 6\n")
    assert main(["run", "--config", str(cfg), "--level", "4", "--no-error"]) == 0
    (row,) = _rows(capsys.readouterr().out)
    assert row["L"] == "4" and row["N_I"] == "20"


def test_single_entry_sweep_has_blank_rates(capsys):
    assert main(["sweep", "--case", "lax_liu_6", "--methods", "mr", "--levels", "5", "--no-error"]) == 0
    (row,) = _rows(capsys.readouterr().out)
    M.validate_row(row)
    for k in ("cpu_compression", "perturbation", "overhead"):
        assert row[k] == ""


def test_fv_level_sweep_rates_are_error_ratios(capsys):
    assert main(["sweep", "--case", "lax_liu_6", "--methods", "fv", "--levels", "3,4,5",
                 "--ref-level", "6"]) == 0
    text = capsys.readouterr().out
    rows = _rows(text)
    errs = [float(r["l1_rho"]) for r in rows]
    table = [ln.split() for ln in text.split("\n\n", 1)[1].splitlines() if ln.startswith("FV")]
    for (prev, cur), line in zip(zip(errs, errs[1:]), table[1:]):
        assert float(line[3]) == pytest.approx(math.log2(prev / cur), abs=1e-3)


def test_sweep_rates_adaptive_rows_against_fv(capsys):
    assert main(["sweep", "--case", "lax_liu_6", "--methods", "fv,mr,amr", "--levels", "5",
                 "--ref-level", "6"]) == 0
    rows = _rows(capsys.readouterr().out)
    by = {r["method"]: r for r in rows if r["method"] != "FV"}
    assert set(by) == {"MR", "AMR"}
    for r in by.values():
        M.validate_row(r)
        assert r["perturbation"] != "" and float(r["memory_compression"]) >= float(r["mesh_compression"])
    assert sum(r["method"] == "FV" for r in rows) == 2  # one baseline per scheme preset


def test_reference_and_compare(tmp_path, capsys):
    assert main(["reference", "--case", "lax_liu_6", "--level", "5"]) == 0
    assert "L=5" in capsys.readouterr().out
    assert len(list((tmp_path / "cache").glob("ref_lax_liu_6_L5_*.snap"))) == 1
    out = tmp_path / "o"
    out.mkdir()
    main(["run", "--case", "lax_liu_6", "--method", "fv", "--level", "4", "--no-error", "--out", str(out)])
    main(["run", "--case", "lax_liu_6", "--method", "fv", "--level", "5", "--no-error", "--out", str(out)])
    capsys.readouterr()
    a, b = sorted(out.glob("*.snap"))
    assert main(["compare", str(a), str(b)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].split()[0] == "rho" and float(lines[1].split()[1]) > 0
