import time

import numpy as np
import pytest

from heatdfc.dyncorr import dyncorr_matrix
from heatdfc.synth import CohortSpec, simulate_cohort

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def record_acceptance(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


class Timed:
    """Lazily computed values with the time each one took."""

    def __init__(self):
        self.values = {}
        self.seconds = {}

    def get(self, key, build):
        if key not in self.values:
            start = time.perf_counter()
            self.values[key] = build()
            self.seconds[key] = time.perf_counter() - start
        return self.values[key]


@pytest.fixture(scope="session")
def regime_cohort():
    """40 subjects, three planted regimes, T=300, p=10."""
    return simulate_cohort(CohortSpec(n_mz=10, n_dz=10, n_time=300, n_regions=10, seed=1))


@pytest.fixture(scope="session")
def cache():
    return Timed()


@pytest.fixture(scope="session")
def cohort_series(regime_cohort, cache):
    """``series(method, fwhm)`` -> dict subject_id -> (T, E) correlations."""

    def series(method, fwhm):
        return cache.get(
            ("series", method, fwhm),
            lambda: {
                s.roi.subject_id: dyncorr_matrix(s.roi, method, fwhm_tr=fwhm).values
                for s in regime_cohort
            },
        )

    return series


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
