"""Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary."""

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): an acceptance criterion")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    results = item.config._acceptance
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if failed or (report.when == "call" and number not in results):
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        results[number] = (title, "FAIL" if failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, verdict, detail = results[number]
        line = f"[{verdict}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
