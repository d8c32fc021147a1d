import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# Criterion title -> (passed so far, seen).  Filled by the hook below from
# tests in test_acceptance.py and printed one line per criterion at the end.
_acceptance: dict = {}


def _criterion_title(item) -> str | None:
    if item.module.__name__ != "test_acceptance":
        return None
    doc = item.function.__doc__ or item.name
    return doc.strip().splitlines()[0]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    title = _criterion_title(item)
    if title is None:
        return
    passed, _ = _acceptance.get(title, (True, False))
    if report.when == "call":
        passed = passed and report.passed
    elif report.failed or report.skipped:
        passed = False
    _acceptance[title] = (passed, True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance:
        return
    terminalreporter.write_line("")
    for title, (passed, _) in _acceptance.items():
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {verdict}: {title}")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260823)
