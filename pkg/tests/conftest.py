import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
DEMO_CFG = ROOT / "demo.cfg"

_CRITERIA = {}


@pytest.fixture(scope="session")
def demo_cfg_path():
    return DEMO_CFG


@pytest.fixture
def record_criterion():
    """Register the verdict of one acceptance criterion for the summary."""

    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
