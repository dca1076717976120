from __future__ import annotations

import pytest

# criterion number -> (title, status), filled while the acceptance tests run
CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = int(marker.args[0]), str(marker.args[1])
    if report.when == "call" or report.failed or report.skipped:
        status = "FAIL" if report.failed else ("SKIP" if report.skipped else "PASS")
        if CRITERIA.get(number, (title, "PASS"))[1] == "FAIL":
            status = "FAIL"
        CRITERIA[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, status = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
