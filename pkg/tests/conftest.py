"""Shared pytest plumbing: the per-criterion acceptance summary.

Tests tagged @pytest.mark.criterion(number, title) are aggregated (AND across
parametrizations) and reported as one PASS/FAIL line each at the end of the
run, so the acceptance sweep reads as a checklist."""

import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(number, title): tag a test as part of one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True})
    if report.failed or (report.skipped and report.when == "call"):
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        terminalreporter.write_line(
            "criterion %d (%s): %s"
            % (number, entry["title"], "PASS" if entry["passed"] else "FAIL"))
