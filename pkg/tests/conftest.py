"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

import pytest

RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def record(request):
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0]

    def _record(passed: bool, detail: str) -> None:
        RESULTS[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number = marker.args[0]
    if rep.failed and (number not in RESULTS or RESULTS[number][0]):
        message = str(call.excinfo.value).strip().split("\n")[0] if call.excinfo else "failed"
        RESULTS[number] = (False, message[:200])


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        passed, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")
