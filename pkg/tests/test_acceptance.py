"""Acceptance criteria 1-10.

Each test prints one ``PASS``/``FAIL`` line (also repeated in the terminal
summary) and then asserts. The Monte Carlo criteria run at the stated
replication counts and take several minutes each on one core.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from defuse import simbench as sb
from defuse.data import unit_contrast
from defuse.estimator import FusionContext, PipelineConfig, build_ss_refinement
from defuse.nuisance import NuisanceConfig, fit_nuisances, make_fold_plan
from defuse.screening import compute_delta
from defuse.simbench import ScenarioSpec

from conftest import ACCEPTANCE, mcar_dataset, simulated

WORKERS = int(os.environ.get("DEFUSE_THREADS", os.cpu_count() or 1))


def report(number: int, ok: bool, detail: str, started: float) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail} ({time.perf_counter() - started:.1f} s)"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def _mc(setting, reps, **kw):
    return sb.run_monte_carlo(ScenarioSpec(setting, **kw), reps=reps, n_jobs=WORKERS)


def test_1_mcar_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    ds = mcar_dataset(rng, n=1000, N=2000)
    nuis = fit_nuisances(ds, make_fold_plan(ds, K=5, seed=1), NuisanceConfig())
    d = rng.normal(size=(1000, 4)) * rng.exponential(size=(1000, 1))
    lm = rng.normal(size=ds.lm[0].n)
    ok = np.array_equal(nuis.op_lc.transform(d), d) and np.array_equal(nuis.op_lm[0].transform(lm), lm)
    elapsed = time.perf_counter() - t0
    report(1, ok and elapsed < 1.0, f"transform equals input exactly: {ok}", t0)


def test_2_qp_optimality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_q = worst_t = -np.inf
    runs = [("I", 0), ("III", 1), ("IV", 2), ("VI", 3)]
    for setting, seed in runs:
        sc = simulated(setting, seed=seed, n=300, N=3000)
        ctx = FusionContext(sc.dataset, sc.glm, PipelineConfig(screening_enabled=False))
        for j in range(ctx.dim):
            for family in ("constant", "linear"):
                cv = ctx.calibrate(unit_contrast(j, ctx.dim), family)
                q = cv.objective(cv.delta)
                probes = [cv.zero(), cv.ones()] + [rng.normal(scale=2.0, size=cv.delta.shape) for _ in range(100)]
                worst_q = max(worst_q, q - min(cv.objective(p) for p in probes))
                ss = build_ss_refinement(ctx.ds, cv, ctx.nuis, family, ctx.config.estimator)
                worst_t = max(worst_t, ss.t_value - ss.objective(np.zeros_like(ss.zeta)))
    ok = worst_q <= 1e-10 and worst_t <= 1e-10 and time.perf_counter() - t0 < 10
    report(2, ok, f"max Q(opt)-min Q(probe) = {worst_q:.2e}, max T(opt)-T(0) = {worst_t:.2e}", t0)


def test_3_constant_calibration_grid():
    t0 = time.perf_counter()
    grid = np.linspace(-5.0, 5.0, 10_000)
    step = grid[1] - grid[0]
    worst = 0.0
    for seed in range(20):
        sc = simulated("I", seed=100 + seed, n=200, N=2000, rho=float(1 + seed % 3))
        ctx = FusionContext(sc.dataset, sc.glm, PipelineConfig(nuisance=NuisanceConfig(K=3), screening_enabled=False))
        cv = ctx.calibrate(unit_contrast(1 + seed % 3, ctx.dim), "constant")
        (blk,) = cv.blocks
        u, v, w = cv.u, blk.v[:, 0], blk.w[:, 0]
        values = [np.var(u - v * g) + np.var(w * g) / blk.rho for g in grid]
        best = grid[int(np.argmin(values))]
        worst = max(worst, abs(cv.delta[0] - best))
    ok = worst <= step and time.perf_counter() - t0 < 30
    report(3, ok, f"max |delta - grid argmin| = {worst:.2e} (grid step {step:.2e})", t0)


def _random_search(b, sigma, rng, probes=100_000, rounds=100):
    """Best theta'b over theta' sigma theta <= 1: a global batch, then shrinking local batches."""
    chol = np.linalg.cholesky(sigma)
    d = b.size
    per = probes // rounds

    def to_ellipsoid(x):
        return np.linalg.solve(chol.T, (x / np.linalg.norm(x, axis=1, keepdims=True)).T).T

    cand = to_ellipsoid(rng.normal(size=(per, d)))
    vals = cand @ b
    best, best_val = cand[np.argmax(vals)], vals.max()
    radius = 0.5
    for _ in range(rounds - 1):
        x = chol.T @ best + radius * rng.normal(size=(per, d))
        cand = to_ellipsoid(x)
        vals = cand @ b
        if vals.max() > best_val:
            best, best_val = cand[np.argmax(vals)], vals.max()
        radius *= 0.9
    return best_val


def test_4_ellipsoid_maximisation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst_gap, worst_excess = 0.0, -np.inf
    for _ in range(20):
        a = rng.normal(size=(6, 6))
        sigma = a @ a.T + 0.05 * np.eye(6)
        b = rng.normal(size=6)
        delta, _ = compute_delta(b, sigma)
        found = _random_search(b, sigma, rng)
        worst_gap = max(worst_gap, (delta - found) / delta)
        worst_excess = max(worst_excess, (found - delta) / delta)
    ok = 0.0 <= worst_gap <= 1e-3 and worst_excess <= 1e-10 and time.perf_counter() - t0 < 30
    report(4, ok, f"max relative gap {worst_gap:.2e}, search never beats closed form: {worst_excess <= 1e-10}", t0)


CRITERION5 = ("lc_only", "defuse_lm_cm_linear", "defuse_cm_linear")


@pytest.mark.slow
def test_5_unbiasedness_and_coverage():
    t0 = time.perf_counter()
    problems, z_max, cov = [], 0.0, []
    for setting, kw in (("I", {}), ("IV", {"shift": 0.2})):
        res = _mc(setting, 500, n=500, **kw)
        for row in res.summary():
            if row["method"] not in CRITERION5 or row["coefficient"] == "all":
                continue
            z = abs(row["bias"]) / row["se_mean"]
            z_max = max(z_max, z)
            cov.append(row["coverage"])
            if z > 3 or not 0.90 <= row["coverage"] <= 0.98:
                problems.append(f"{setting}/{row['method']}/{row['coefficient']}")
    detail = f"max |bias|/SE(mean) = {z_max:.2f}, coverage in [{min(cov):.3f}, {max(cov):.3f}]"
    report(5, not problems, detail + (f"; out of range: {problems}" if problems else ""), t0)


@pytest.mark.slow
def test_6_efficiency_ordering():
    t0 = time.perf_counter()
    res = _mc("IV", 200, shift=0.3)
    d, cm, rm = res.re("defuse_cm_linear"), res.re("defuse_lm_cm_linear"), res.re("defuse_lm_rm_linear")
    ok = d > cm > rm >= 0.95 and 1.1 <= cm <= 2.2 and 1.4 <= d <= 3.0
    report(6, ok, f"RE DEFUSE {d:.3f} > DEFUSE_LM CM {cm:.3f} > DEFUSE_LM RM {rm:.3f}", t0)


@pytest.mark.slow
def test_7_calibration_family_gain():
    t0 = time.perf_counter()
    res = _mc("II", 200)
    lin, con = res.re("defuse_lm_cm_linear", 3), res.re("defuse_lm_cm_constant", 3)
    ok = lin > con and 0.65 * 3.90 <= lin <= 1.35 * 3.90 and 0.65 * 3.12 <= con <= 1.35 * 3.12
    report(7, ok, f"RE on gamma3: linear {lin:.3f}, constant {con:.3f}", t0)


@pytest.mark.slow
def test_8_semi_supervised_gain():
    t0 = time.perf_counter()
    res = _mc("VI", 200, omega_size=4)
    b1, b2 = res.re("defuse_lm_cm_linear"), res.re("defuse_cm_linear")
    report(8, b2 - b1 >= 0.2, f"RE beta2 {b2:.3f} - RE beta1 {b1:.3f} = {b2 - b1:.3f}", t0)


@pytest.mark.slow
def test_9_screening():
    t0 = time.perf_counter()
    runs = [_mc("V", 200, strength=s) for s in sb.STRENGTH_GRID if s >= sb.LARGE_STRENGTH]
    runs.append(_mc("V", 200, strength=1.0, mean_matched=True))
    checks = sb.screening_checks(runs)
    detail = "; ".join(f"{c.name} = {c.value:.3f}" for c in checks)
    report(9, len(checks) == 5 and all(c.passed for c in checks), detail, t0)


def _bench(out, threads):
    env = dict(os.environ, DEFUSE_THREADS=str(threads))
    cmd = [sys.executable, "-m", "defuse", "bench", "V", "--reps", "6", "--strength", "2.0", "--seed", "5",
           "--out", str(out), "--simbench.oracle_rows=100000", "--simbench.n=300", "--simbench.N=3000"]
    subprocess.run(cmd, check=True, env=env, capture_output=True)
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_10_determinism(tmp_path):
    t0 = time.perf_counter()
    a = _bench(tmp_path / "one", 1)
    b = _bench(tmp_path / "two", 3)
    ok = a == b and set(a) == {"summary_V.csv", "screening_V.csv"}
    report(10, ok and time.perf_counter() - t0 < 300, f"byte-identical CSVs across DEFUSE_THREADS 1 and 3: {a == b}", t0)
