import sys
from pathlib import Path

import pytest

# Make the memory_dml package importable from the source tree
sys.path.append(str(Path(__file__).resolve().parent / "src"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training acceptance runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
