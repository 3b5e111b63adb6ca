import pytest

_CRITERIA: dict[str, list[str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.setdefault(props["criterion"], []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split()[0])):
        outcomes = _CRITERIA[name]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"[{verdict}] criterion {name}")


@pytest.fixture
def criterion(record_property):
    """Tag a test with the acceptance criterion it checks; the verdicts are summarized at the end."""
    return lambda label: record_property("criterion", label)
