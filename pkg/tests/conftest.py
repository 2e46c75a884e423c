import pytest

_results: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "setup" and rep.skipped:
        _results[n] = ("SKIP", str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else detail)
    elif rep.when == "call":
        if rep.skipped:
            reason = rep.longrepr[-1] if isinstance(rep.longrepr, tuple) else ""
            _results[n] = ("SKIP", reason.removeprefix("Skipped: "))
        else:
            _results[n] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, detail = _results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
