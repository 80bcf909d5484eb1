import numpy as np
import pytest

from defuse import simbench as sb
from defuse.errors import NumericalError, TooManyFailures, UndefinedAUC
from defuse.simbench import ScenarioSpec

from conftest import simulated


def test_auc_known_values():
    assert sb.auc([3, 2, 1], [True, False, False]) == 1.0
    assert sb.auc([1, 2, 3], [True, False, False]) == 0.0
    assert sb.auc([1, 1, 1, 1], [True, False, True, False]) == 0.5
    assert sb.auc([0.9, 0.5, 0.5, 0.1], [True, True, False, False]) == pytest.approx(0.875)
    with pytest.raises(UndefinedAUC):
        sb.auc([1, 2], [True, True])


def test_f1_known_values():
    assert sb.f1_score([True, False], [True, False]) == 1.0
    assert sb.f1_score([True, True, False, False], [True, False, True, False]) == 0.5
    assert sb.f1_score([False, False], [False, False]) == 1.0


@pytest.mark.parametrize("setting", sb.SETTINGS)
def test_every_setting_generates_consistent_data(setting):
    sc = simulated(setting, n=80, N=400)
    ds = sc.dataset
    assert ds.R == sc.spec.R and ds.n == 80 and ds.N == 400
    for src, rho in zip(ds.lm, sc.spec.rho):
        assert src.n == round(rho * 80)
    assert set(sc.misaligned) <= set(range(1, ds.R + 1))


def test_generation_is_seeded():
    a, b = simulated("IV", seed=3), simulated("IV", seed=3)
    np.testing.assert_array_equal(a.dataset.lc_x, b.dataset.lc_x)
    assert not np.array_equal(a.dataset.lc_x, simulated("IV", seed=4).dataset.lc_x)


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec("VII")
    with pytest.raises(ValueError):
        ScenarioSpec("I", R=2)
    assert ScenarioSpec("IV").shift == 0.2 and ScenarioSpec("V").rho == (2.0,) * 4


def test_only_setting_v_has_misaligned_sources():
    assert len(simulated("V", misaligned=3).misaligned) == 3
    assert simulated("I").misaligned == ()


def test_oracle_coefficients_are_cached_and_stable():
    spec = ScenarioSpec("I")
    g1 = sb.oracle_gamma(spec, 200_000)
    g2 = sb.oracle_gamma(spec, 200_000)
    np.testing.assert_array_equal(g1, g2)
    assert g1.shape == (4,)


def test_monte_carlo_is_independent_of_worker_count():
    spec = ScenarioSpec("I", n=150, N=1500)
    one = sb.run_monte_carlo(spec, reps=4, oracle_rows=50_000, n_jobs=1)
    two = sb.run_monte_carlo(spec, reps=4, oracle_rows=50_000, n_jobs=2)
    for name in one.estimates:
        np.testing.assert_array_equal(one.estimates[name], two.estimates[name])
    rows = one.summary()
    assert {r["method"] for r in rows} == {m.name for m in sb.default_methods("I")}
    assert all(r["re"] == 1.0 for r in rows if r["method"] == "lc_only")


def _fake(spec, methods, rep, oracle_rows, base=None):
    if rep in (0, 1):
        raise NumericalError("boom")
    q = 2
    return {"rep": rep, "est": {m.name: np.full(q, float(rep)) for m in methods},
            "se": {m.name: np.ones(q) for m in methods}, "truth": np.zeros(q), "screen": {}, "misaligned": ()}


def test_failures_are_recorded_then_capped(monkeypatch):
    monkeypatch.setattr(sb, "run_replication", _fake)
    spec = ScenarioSpec("I")
    with pytest.raises(TooManyFailures):
        sb.run_monte_carlo(spec, reps=50, oracle_rows=0, n_jobs=1)
    res = sb.run_monte_carlo(spec, reps=100, oracle_rows=0, n_jobs=1)
    assert [r for r, _ in res.failures] == [0, 1] and res.reps_ok == 98


def test_screening_statistics_in_setting_v():
    spec = ScenarioSpec("V", n=300, N=3000, strength=3.0)
    res = sb.run_monte_carlo(spec, reps=3, oracle_rows=20_000, n_jobs=1)
    assert len(res.screening) == 3 and all(len(lab) == 4 for lab in res.labels)
    auc, f1 = sb.score_screening(res, "msd")
    assert 0.0 <= auc <= 1.0 and 0.0 <= f1 <= 1.0
    rows = sb.screening_rows(res)
    assert {r["method"] for r in rows} == {"msd", "md"}


def test_csv_writer(tmp_path):
    path = tmp_path / "x.csv"
    sb.write_rows(path, "# head", ("a", "b"), [{"a": 1, "b": 0.5}])
    assert path.read_text() == "# head\na,b\n1,0.5\n"
