import numpy as np
import pytest

from zipg import rng
from zipg.model import LongitudinalDataset, ModelSpec
from zipg.simulation import ScenarioConfig, simulate_dataset


def small_dataset(seed=0, n_subjects=5, m=4, zi=False):
    """Tiny random dataset with two mean and one dispersion covariate."""
    g = np.random.default_rng(seed)
    subject_of = np.repeat(np.arange(n_subjects), m)
    n = subject_of.size
    x1 = g.integers(0, 2, n_subjects).astype(float)
    x = np.column_stack([x1[subject_of], g.normal(size=n)])
    counts = np.where(g.random(n) < 0.4, 0, g.negative_binomial(2, 0.05, n))
    return LongitudinalDataset(
        counts=counts,
        depths=g.integers(500, 5000, n),
        mean_covariates=x,
        disp_covariates=x1.reshape(-1, 1),
        subject_of=subject_of,
        zi_covariates=x[:, :1] if zi else None,
    )


@pytest.fixture
def toy():
    return small_dataset()


@pytest.fixture(scope="session")
def null_data():
    cfg = ScenarioConfig()
    data = simulate_dataset(cfg, rng.stream(12345, 0))
    return cfg, data, ModelSpec.for_data(data)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    def record(criterion, passed, detail):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
