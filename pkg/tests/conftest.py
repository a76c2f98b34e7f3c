import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cgmgan.grid import RegionSpec  # noqa: E402
from cgmgan.radiosim import ChannelParams  # noqa: E402
from cgmgan.urbangen import UrbanParams, generate_environment  # noqa: E402

# (criterion, passed, detail) rows collected by the acceptance suite
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def full_spec():
    return RegionSpec(256, 256, 128, 8, 8, 4)


@pytest.fixture(scope="session")
def desk_spec():
    return RegionSpec(128, 128, 64, 8, 8, 4)


@pytest.fixture(scope="session")
def small_env(desk_spec):
    return generate_environment(desk_spec, UrbanParams(gamma_h=25, seed=7))


@pytest.fixture(scope="session")
def channel():
    return ChannelParams()
