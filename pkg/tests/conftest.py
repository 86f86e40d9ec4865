from __future__ import annotations

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_lines: list[tuple[int, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    detail = dict(report.user_properties).get("detail", "")
    verdict = "PASS" if report.passed else "FAIL"
    _lines.append((int(m.group(1)), f"criterion {m.group(1)}: {verdict}  {detail}".rstrip()))


def pytest_terminal_summary(terminalreporter):
    if not _lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_lines):
        terminalreporter.write_line(line)
