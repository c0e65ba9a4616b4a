import warnings

import pytest


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


OUTCOMES = {}
NOTES = {}


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the acceptance summary."""
    name = request.node.name

    def add(text):
        NOTES.setdefault(name, []).append(text)

    return add


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.failed:
        OUTCOMES[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(OUTCOMES):
        tag = {"passed": "PASS", "failed": "FAIL"}.get(OUTCOMES[name], OUTCOMES[name].upper())
        detail = "; ".join(NOTES.get(name, []))
        terminalreporter.write_line(f"{tag}  {name}" + (f"  ({detail})" if detail else ""))
