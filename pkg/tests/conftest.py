"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

import pytest

_LINES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.fixture
def detail(request):
    """Tests call ``detail("...")`` to attach measured numbers to their acceptance line."""
    notes = []
    request.node._acceptance_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        number, title = mark.args
        notes = "; ".join(getattr(item, "_acceptance_notes", []))
        status = "PASS" if rep.passed else "FAIL"
        _LINES[number] = f"[{status}] criterion {number:>2}: {title}" + (f" ({notes})" if notes else "")


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
