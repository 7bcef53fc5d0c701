import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(number, ok, detail)``."""
    def record(number, ok, detail):
        request.config.stash[_VERDICTS].append((number, ok, detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(config.stash.get(_VERDICTS, []))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in lines:
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
