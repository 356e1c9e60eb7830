import time

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    item.user_properties.append(("elapsed", time.perf_counter() - start))


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker
    elapsed = dict(report.user_properties).get("elapsed", 0.0)
    ok = report.passed
    prev = _RESULTS.get(number)
    if prev is not None:
        ok = ok and prev[1]
        elapsed += prev[2]
    _RESULTS[number] = (title, ok, elapsed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report._criterion = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, elapsed = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  ({elapsed:.1f} s)")
