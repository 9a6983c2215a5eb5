import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance criteria report their verdicts here; printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_pair(rng, d=12, n1=7, n2=5, density=1.0):
    A = rng.standard_normal((d, n1))
    B = rng.standard_normal((d, n2))
    if density < 1.0:
        A *= rng.random(A.shape) < density
        B *= rng.random(B.shape) < density
    return A, B
