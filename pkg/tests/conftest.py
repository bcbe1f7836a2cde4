import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from genckpt.fs import SimFS  # noqa: E402
from genckpt.store import GenerationStore  # noqa: E402

settings.register_profile(
    "genckpt", deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow]
)
settings.load_profile("genckpt")

MiB = 1 << 20


@pytest.fixture
def simfs():
    return SimFS()


@pytest.fixture
def store(simfs):
    return GenerationStore("/store", fs=simfs, wallclock=lambda: 1000.0)


@pytest.fixture
def real_store(tmp_path):
    return GenerationStore(str(tmp_path / "store"))


# filled by test_acceptance; one (number, verdict, text) per criterion that ran
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, verdict, text in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{verdict} criterion {n}: {text}")
