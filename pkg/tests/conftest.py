import pytest

_RESULTS: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number covered by the test")
    config.addinivalue_line("markers", "slow: trains full toy models (minutes each)")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for n in getattr(report, "criteria", ()):
        _RESULTS.setdefault(n, []).append(report.outcome == "passed")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    outcome.get_result().criteria = [m.args[0] for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok = all(_RESULTS[n])
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}")
