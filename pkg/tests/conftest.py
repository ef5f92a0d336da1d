import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kinfit import default_frame_schedule, default_input_function

settings.register_profile(
    "kinfit", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("kinfit")


@pytest.fixture(scope="session")
def IF():
    return default_input_function()


@pytest.fixture(scope="session")
def grid():
    return default_frame_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import lines

    out = lines()
    if out:
        terminalreporter.section("acceptance criteria")
        for line in out:
            terminalreporter.write_line(line)
