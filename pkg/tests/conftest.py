import re

_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _RESULTS[n] = ("PASS" if report.passed else "FAIL", m.group(2))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        verdict, name = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}  {verdict}  {name}")
    summary = getattr(terminalreporter.config, "desk_run_summary", None)
    if summary:
        terminalreporter.write_line(f"desk run: {summary}")
