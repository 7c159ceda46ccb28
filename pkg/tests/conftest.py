from datetime import datetime, timedelta

import numpy as np
import pytest

from mldrl.microgrid import MicrogridParams
from mldrl.profiles import synthesize_set


@pytest.fixture(scope="session")
def params() -> MicrogridParams:
    return MicrogridParams()


@pytest.fixture(scope="session")
def short_profiles():
    """Five days of synthetic profiles, enough for short runs at small horizons."""
    return synthesize_set(3, datetime(2022, 1, 1), 5, timedelta(minutes=30))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
