import pytest

_criteria: dict[int, tuple[str, str, list]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    # a setup or teardown failure also decides the criterion
    if rep.when == "call" or rep.failed or rep.skipped:
        if number not in _criteria or _criteria[number][1] == "passed":
            _criteria[number] = (title, rep.outcome, list(item.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome, props = _criteria[number]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        extra = " ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"{status} [{number}] {title}" + (f"  ({extra})" if extra else ""))
