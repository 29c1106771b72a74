import json
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ORACLES = Path(__file__).parent / "oracles" / "values.json"


@pytest.fixture(scope="session")
def oracle():
    """Reference values frozen by ``tests/oracles/make_oracles.py``."""
    return json.loads(ORACLES.read_text())


_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        number = int(name.split("_")[2])
        title = name.split("_", 3)[3].replace("_", " ")
        _CRITERIA[number] = (title, "PASS" if report.outcome == "passed" else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome = _CRITERIA[number]
        terminalreporter.write_line(f"{outcome}  criterion {number:2d}: {title}")
