import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).parent
sys.path.insert(0, str(TESTS_DIR))  # make oracles importable from test modules

DATA_DIR = TESTS_DIR.parent / "src" / "gridvolt" / "data"


@pytest.fixture(scope="session")
def benchmark_network_path():
    return DATA_DIR / "benchmark_network.json"


@pytest.fixture(scope="session")
def benchmark_fleet_path():
    return DATA_DIR / "benchmark_fleet.json"


@pytest.fixture(scope="session")
def tariffs_path():
    return DATA_DIR / "tariffs.json"
