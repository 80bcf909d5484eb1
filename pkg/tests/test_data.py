import numpy as np
import pytest

from defuse.data import (FusedDataset, GlmSpec, LabeledMissingSource, load_dataset, save_dataset, unit_contrast,
                         validate_overlap)
from defuse.errors import AlignmentViolation, ConfigError, EmptySource, MissingColumn, NonNumericCell, ValidationError

from conftest import TOY, simulated


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def _manifest(tmp_path, lc_header="x1,x2,y", lc_rows=("1,2,3", "2,1,0", "0,1,1"), extra=""):
    _write(tmp_path / "lc.csv", "\n".join((lc_header,) + tuple(lc_rows)) + "\n")
    _write(tmp_path / "uc.csv", "x1,x2\n1,1\n2,2\n3,0\n")
    _write(tmp_path / "lm.csv", "x1,y\n1,1\n2,2\n")
    return _write(tmp_path / "manifest.toml",
                  '[lc]\npath = "lc.csv"\noutcome = "y"\n\n[uc]\npath = "uc.csv"\n' + extra)


def test_toy_manifest_loads():
    ds, glm = load_dataset(TOY / "manifest.toml")
    assert (ds.n, ds.N, ds.R, ds.p) == (200, 1500, 2, 5)
    assert ds.covariate_names == ("x1", "x2", "x3", "x4", "x5")
    assert ds.predictors == (0, 1, 2, 3)
    assert glm.link == "identity" and glm.intercept
    assert ds.lm[0].observed == (0, 1, 3, 4)


def test_save_then_load_is_exact(tmp_path):
    sc = simulated("III", n=60, N=200)
    path = save_dataset(sc.dataset, tmp_path, sc.glm)
    ds, glm = load_dataset(path)
    np.testing.assert_array_equal(ds.lc_x, sc.dataset.lc_x)
    np.testing.assert_array_equal(ds.uc_x, sc.dataset.uc_x)
    for a, b in zip(ds.lm, sc.dataset.lm):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        assert (a.observed, a.omega) == (b.observed, b.omega)
    assert glm.link == sc.glm.link


def test_missing_outcome_column(tmp_path):
    m = _manifest(tmp_path, lc_header="x1,x2,z")
    with pytest.raises(MissingColumn):
        load_dataset(m)


def test_non_numeric_cell_reports_location(tmp_path):
    m = _manifest(tmp_path, lc_rows=("1,2,3", "2,oops,0", "0,1,1"))
    with pytest.raises(NonNumericCell, match="oops"):
        load_dataset(m)


def test_alignment_must_be_observed(tmp_path):
    m = _manifest(tmp_path, extra='\n[lm.1]\npath = "lm.csv"\nobserved = ["x1"]\nomega = ["x2"]\n')
    with pytest.raises(AlignmentViolation):
        load_dataset(m)


def test_lm_sections_numbered_from_one(tmp_path):
    m = _manifest(tmp_path, extra='\n[lm.2]\npath = "lm.csv"\nobserved = ["x1"]\n')
    with pytest.raises(ConfigError):
        load_dataset(m)


def test_uc_must_not_carry_outcome(tmp_path):
    m = _manifest(tmp_path)
    _write(tmp_path / "uc.csv", "x1,x2,y\n1,1,1\n")
    with pytest.raises(ValidationError):
        load_dataset(m)


def test_logit_requires_binary_outcome(tmp_path):
    m = _manifest(tmp_path)
    m.write_text(m.read_text() + '\n[model]\nlink = "logit"\n')
    with pytest.raises(ValidationError):
        load_dataset(m)


def test_contrast_is_normalised(tmp_path):
    m = _manifest(tmp_path)
    m.write_text(m.read_text() + "\n[model]\ncontrast = [0, 3, 4]\n")
    _, glm = load_dataset(m)
    np.testing.assert_allclose(glm.contrast, [0, 0.6, 0.8])


def test_empty_sources_rejected():
    x = np.zeros((0, 2))
    with pytest.raises(EmptySource):
        LabeledMissingSource((0, 1), (), x, np.zeros(0))
    with pytest.raises(EmptySource):
        FusedDataset(("a", "b"), (0, 1), x, np.zeros(0), np.ones((3, 2)))


def test_arrays_are_read_only(setting_one):
    with pytest.raises(ValueError):
        setting_one.dataset.lc_x[0, 0] = 1.0


def test_unit_contrast_and_design():
    np.testing.assert_array_equal(unit_contrast(1, 3), [0, 1, 0])
    glm = GlmSpec("identity")
    a = glm.design(np.array([[2.0, 3.0]]))
    np.testing.assert_array_equal(a, [[1.0, 2.0, 3.0]])


def test_overlap_flags_nothing_without_shift():
    diags = validate_overlap(simulated("I", n=200, N=1000, shift=0.0).dataset)
    assert all(d.ratio_min > 0.01 and d.ratio_max < 100 for d in diags)
