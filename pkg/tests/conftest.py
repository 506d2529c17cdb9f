import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    results = item.config.stash.setdefault(_RESULTS, {})
    # every phase counts towards the time (fixtures may do the work); any failure fails the criterion
    _, passed, duration = results.get(number, (title, True, 0.0))
    results[number] = (title, passed and not rep.failed, duration + rep.duration)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, duration = results[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {number:2d}. {title}  ({duration:.1f}s)")
