import math
import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA = os.path.join(ROOT, "data")
CONFIGS = os.path.join(ROOT, "configs")

OMEGA_FIG2 = 4.05
RISE = 0.01


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def pulse():
    """Pi/2-area pulse at 4.05 MHz with 10 ns linear switching, detuning 0."""
    from rydquench.model import pulse_hold_time, sudden_schedule
    hold = pulse_hold_time(OMEGA_FIG2, math.pi / 2, RISE, RISE)
    return sudden_schedule(OMEGA_FIG2, 0.0, hold, RISE, RISE)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
