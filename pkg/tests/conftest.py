"""Shared pytest configuration: acceptance-criterion reporting.

Tests marked ``@pytest.mark.criterion(n, "name")`` get one PASS/FAIL line
each in the terminal summary.
"""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(num, name): acceptance criterion identity")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, name = marker.args
    if rep.when == "call":
        _RESULTS[(num, name)] = "PASS" if rep.passed else "FAIL"
    elif rep.when == "setup" and (rep.failed or rep.skipped):
        _RESULTS[(num, name)] = "SKIP" if rep.skipped else "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), verdict in sorted(_RESULTS.items()):
        terminalreporter.write_line(f"criterion {num:>2} ({name}): {verdict}")
