from pathlib import Path

import numpy as np
import pytest

from defuse.data import FusedDataset, LabeledMissingSource
from defuse.simbench import ScenarioSpec, generate

TOY = Path(__file__).parent / "data" / "toy"


def simulated(setting="I", seed=0, **kw):
    kw.setdefault("n", 300)
    kw.setdefault("N", 3000)
    return generate(ScenarioSpec(setting, **kw), np.random.default_rng(seed), oracle_rows=0)


def mcar_dataset(rng, n=120, N=800, n_lm=150, p=4):
    """Linear-Gaussian data where every alignment set is empty."""
    beta = np.array([0.5, -0.3, 0.8, 0.2])[:p]

    def draw(m):
        x = rng.normal(size=(m, p))
        return x, 1.0 + x @ beta + rng.normal(size=m)

    lc_x, lc_y = draw(n)
    lm_x, lm_y = draw(n_lm)
    obs = tuple(range(p - 1))
    src = LabeledMissingSource(obs, (), lm_x[:, list(obs)], lm_y, "lm1")
    return FusedDataset(tuple(f"x{j}" for j in range(p)), tuple(range(p)), lc_x, lc_y, rng.normal(size=(N, p)), (), (src,))


@pytest.fixture(scope="session")
def toy_manifest():
    return TOY / "manifest.toml"


@pytest.fixture(scope="session")
def setting_one():
    return simulated("I")


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
