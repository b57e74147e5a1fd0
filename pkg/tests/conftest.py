import pytest

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    key = tuple(mark.args)
    ok = _outcomes.setdefault(key, [True, []])
    if report.failed or (report.when == "call" and report.skipped):
        ok[0] = False
        ok[1].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (passed, failures) in sorted(_outcomes.items()):
        status = "PASS" if passed else "FAIL"
        extra = "" if passed else f"  ({', '.join(failures)})"
        terminalreporter.write_line(f"criterion {number} [{status}] {title}{extra}")
