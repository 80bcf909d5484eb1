import re

import pytest
from click.testing import CliRunner

from defuse import __version__
from defuse.cli import main

from conftest import TOY


def _run(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def _body(path):
    lines = path.read_text().splitlines()
    assert re.fullmatch(rf"# defuse {re.escape(__version__)} config=[0-9a-f]{{64}}", lines[0])
    return lines[1:]


def test_golden_report(tmp_path):
    res = _run("estimate", TOY / "manifest.toml", "--out", tmp_path)
    assert res.exit_code == 0, res.output
    assert (tmp_path / "estimate_report.csv").read_text() == (TOY / "golden_report.csv").read_text()
    assert "beta2=" in res.output
    assert _body(tmp_path / "screening.csv")[0] == "contrast,source,delta,tau,selected"


def test_no_screening_is_noted(tmp_path):
    res = _run("estimate", TOY / "manifest.toml", "--out", tmp_path, "--no-screening")
    assert res.exit_code == 0, res.output
    rows = _body(tmp_path / "estimate_report.csv")[1:]
    assert all(r.endswith(",1;2,screening skipped") for r in rows)
    assert not (tmp_path / "screening.csv").exists()


def test_single_pass_variant_runs(tmp_path):
    res = _run("estimate", TOY / "manifest.toml", "--out", tmp_path, "--no-rescreen-recalibrate")
    assert res.exit_code == 0, res.output


def test_report_without_sources(tmp_path):
    (tmp_path / "m.toml").write_text(
        f'[lc]\npath = "{(TOY / "lc.csv").as_posix()}"\noutcome = "y"\n[uc]\npath = "{(TOY / "uc.csv").as_posix()}"\n')
    res = _run("estimate", tmp_path / "m.toml", "--out", tmp_path)
    assert res.exit_code == 0, res.output
    header, *rows = _body(tmp_path / "estimate_report.csv")
    cols = header.split(",")
    for row in rows:
        rec = dict(zip(cols, row.split(",")))
        assert rec["beta1"] == rec["se1"] == rec["beta_dagger"] == rec["selected"] == ""
        assert rec["beta_lc_only"] and rec["beta2"] and rec["se2"]


def test_config_flag_changes_hash(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("estimate", TOY / "manifest.toml", "--out", a).exit_code == 0
    assert _run("estimate", TOY / "manifest.toml", "--out", b, "--estimator.family=constant").exit_code == 0
    assert (a / "estimate_report.csv").read_text().splitlines()[0] != (b / "estimate_report.csv").read_text().splitlines()[0]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[estimator]\nfamily = "quartic"\n')
    assert _run("estimate", TOY / "manifest.toml", "--config", cfg, "--out", tmp_path).exit_code == 2
    ok = _run("estimate", TOY / "manifest.toml", "--config", cfg, "--estimator.family", "linear", "--out", tmp_path)
    assert ok.exit_code == 0, ok.output


@pytest.mark.parametrize("extra", [["--bogus.key=1"], ["--nuisance.K=zero"], ["stray"]])
def test_bad_flags_exit_2(tmp_path, extra):
    res = _run("estimate", TOY / "manifest.toml", "--out", tmp_path, *extra)
    assert res.exit_code == 2
    assert "error during config" in res.output


def test_validation_error_names_stage(tmp_path):
    (tmp_path / "lc.csv").write_text("x1,y\n1,a\n")
    (tmp_path / "uc.csv").write_text("x1\n1\n")
    (tmp_path / "m.toml").write_text('[lc]\npath = "lc.csv"\noutcome = "y"\n[uc]\npath = "uc.csv"\n')
    res = _run("estimate", tmp_path / "m.toml", "--out", tmp_path)
    assert res.exit_code == 2
    assert "error during load: NonNumericCell" in res.output


def test_numerical_error_exit_3(tmp_path):
    # A constant covariate makes the UC design singular.
    rows = "\n".join(f"1,{i % 3}" for i in range(40))
    (tmp_path / "lc.csv").write_text("x1,y\n" + rows + "\n")
    (tmp_path / "uc.csv").write_text("x1\n" + "\n".join("1" for _ in range(40)) + "\n")
    (tmp_path / "m.toml").write_text('[lc]\npath = "lc.csv"\noutcome = "y"\n[uc]\npath = "uc.csv"\n')
    res = _run("estimate", tmp_path / "m.toml", "--out", tmp_path)
    assert res.exit_code == 3, res.output
    assert "error during preliminary" in res.output


def test_screen_and_validate(tmp_path):
    res = _run("screen", TOY / "manifest.toml", "--out", tmp_path)
    assert res.exit_code == 0, res.output
    assert len(_body(tmp_path / "screening.csv")) == 1 + 2 * 5
    res = _run("validate", TOY / "manifest.toml")
    assert res.exit_code == 0 and res.output.rstrip().endswith("ok")


def test_bench_smoke_marks_low_precision(tmp_path):
    res = _run("bench", "I", "--reps", 2, "--out", tmp_path, "--simbench.oracle_rows=20000")
    assert res.exit_code == 0, res.output
    assert "low precision" in res.output
    assert _body(tmp_path / "summary_I.csv")[0] == "setting,method,coefficient,bias,se,re,coverage"


def test_bench_rejects_single_rep(tmp_path):
    assert _run("bench", "I", "--reps", 1, "--out", tmp_path).exit_code == 2


def test_version():
    assert __version__ in _run("--version").output
