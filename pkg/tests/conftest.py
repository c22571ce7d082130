import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test checks")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, title = marker.args
        detail = dict(item.user_properties).get("detail", "")
        results = item.config.stash[_RESULTS]
        # a criterion checked by several tests passes only if all of them do
        _, ok, details = results.get(number, (title, True, []))
        results[number] = (title, ok and report.passed, details + ([detail] if detail else []))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, details = results[number]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
        if details:
            line += " | " + "; ".join(details)
        terminalreporter.write_line(line)
