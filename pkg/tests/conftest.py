import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_acceptance: dict[str, tuple[str, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_collection_modifyitems(items):
    for item in items:
        if item.module.__name__.endswith("test_acceptance"):
            doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
            _acceptance[item.nodeid] = (doc, "NOT RUN")


def pytest_runtest_logreport(report):
    if report.nodeid in _acceptance:
        doc, status = _acceptance[report.nodeid]
        if report.failed:
            status = "FAIL"
        elif report.when == "call" and report.passed and status != "FAIL":
            status = "PASS"
        _acceptance[report.nodeid] = (doc, status)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for doc, status in _acceptance.values():
        terminalreporter.write_line(f"[{status}] {doc}")
