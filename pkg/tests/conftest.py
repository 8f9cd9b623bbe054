import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rpmpolicy.simulate import sample_cohort, simulate_panel

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_panel():
    """About 1.5k rows: 40 patients over 60 days, confounded logging."""
    return simulate_panel(sample_cohort(40, 11), 60, 2.0, seed=11)


@pytest.fixture(scope="session")
def panel_30k():
    """About 30k decision rows at confounding strength 2."""
    panel = simulate_panel(sample_cohort(415, 2024), 180, 2.0, seed=2024)
    assert 29_000 <= len(panel) <= 32_000
    return panel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import RESULTS, lines

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in lines():
            terminalreporter.write_line(line)
