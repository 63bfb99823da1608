import time

import pytest

_RESULTS = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    item._started = time.perf_counter()
    yield


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    elapsed = time.perf_counter() - getattr(item, "_started", time.perf_counter())
    reason = ""
    if rep.failed:
        reason = str(call.excinfo.value).strip().splitlines()[0][:160] if call.excinfo else "failed"
    _RESULTS.append((number, title, rep.outcome, elapsed, reason))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, elapsed, reason in sorted(_RESULTS):
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number:2d} {status}  {title}  ({elapsed:.1f}s)"
        terminalreporter.write_line(line + (f"  -- {reason}" if reason else ""))
