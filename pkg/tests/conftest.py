import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prtfusion.geometry import CameraIntrinsics

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def cam():
    return CameraIntrinsics(400.0, 410.0, 192.0, 64.0, 384, 128)


@pytest.fixture
def small_cam():
    return CameraIntrinsics(50.0, 55.0, 15.5, 11.0, 32, 24)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, echoed after the run so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
