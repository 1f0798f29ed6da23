import numpy as np
import pytest

from svcmle import CovParams, SvcDataset


def random_instance(rng, n, p, *, intercept=True, nugget=None):
    """Random locations in the unit square, covariates, response and parameters."""
    locs = rng.uniform(size=(n, 2))
    X = rng.standard_normal((n, p))
    if intercept:
        X[:, 0] = 1.0
    y = rng.standard_normal(n)
    theta = CovParams(rng.uniform(0.05, 0.5, p), rng.uniform(0.05, 1.0, p),
                      rng.uniform(0.01, 0.5) if nugget is None else nugget)
    return SvcDataset(y, X, locs), theta


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def report():
    """Record one PASS/FAIL line per acceptance criterion, printed at the end of the run."""

    def _report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
