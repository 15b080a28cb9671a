import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FULL_SCALE = os.environ.get("RELCUSUM_FULL_SCALE", "") not in ("", "0")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ref_model():
    from relcusum.presets import piecewise_model

    return piecewise_model()


@pytest.fixture(scope="session")
def weibull():
    from relcusum.presets import weibull_model

    return weibull_model()


@pytest.fixture(scope="session")
def table():
    from relcusum.presets import norway_like_table

    return norway_like_table(years=range(1990, 2031))


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
