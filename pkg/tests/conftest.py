import pytest

_NOTES = pytest.StashKey[dict]()
_OUTCOMES: dict = {}


def pytest_configure(config):
    config.stash[_NOTES] = {}


@pytest.fixture
def criterion(request):
    """Attach a measured-value note to the running acceptance criterion."""
    return request.config.stash[_NOTES].setdefault(request.node.nodeid, []).append


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        outcome = "xfailed" if hasattr(report, "wasxfail") and report.skipped else report.outcome
        _OUTCOMES.setdefault(report.nodeid, outcome)


def pytest_terminal_summary(terminalreporter, config):
    if not _OUTCOMES:
        return
    notes = config.stash[_NOTES]
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in _OUTCOMES.items():
        mark = {"passed": "PASS", "xfailed": "FAIL (expected, recorded)"}.get(outcome, "FAIL")
        detail = "; ".join(notes.get(nodeid, []))
        terminalreporter.write_line(f"{mark} {nodeid.split('::')[-1]}" + (f"  [{detail}]" if detail else ""))
