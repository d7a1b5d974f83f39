from __future__ import annotations

import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def detail(request):
    """Free-form notes a criterion test wants shown next to its verdict."""
    notes: dict = {}
    request.node._criterion_notes = notes
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        notes = getattr(item, "_criterion_notes", {})
        text = ", ".join(f"{k}={_fmt(v)}" for k, v in notes.items())
        verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _RESULTS[number] = (verdict, title, text)


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        verdict, title, text = _RESULTS[number]
        line = f"criterion {number:2d} [{verdict}] {title}"
        terminalreporter.write_line(line + (f" ({text})" if text else ""))
