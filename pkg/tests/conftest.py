import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import pytest

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when == "teardown" and call.excinfo is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "seconds": 0.0})
    entry["seconds"] += call.duration
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {e['title']} ({e['seconds']:.1f}s)")
