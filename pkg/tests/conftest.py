"""Collects acceptance-criterion outcomes and prints one line per criterion."""

from collections import defaultdict

_outcomes = defaultdict(list)
_titles = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    _titles[n] = title
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _outcomes[n].append(call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _titles:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_titles):
        res = _outcomes.get(n, [])
        status = "PASS" if res and all(res) else ("FAIL" if res else "NOT RUN")
        terminalreporter.write_line(f"criterion {n}: {status}  {_titles[n]}")
