"""Shared pytest configuration.

Hypothesis runs derandomized (property tests are part of the reproducible
suite, not a fuzzing campaign) and without deadlines, since several
properties exercise real dynamic programs.

After the run a one-line verdict is printed for every numbered acceptance
test in test_acceptance.py, so the gate can be read off the tail of the
log without parsing pytest's own summary.
"""

import re

from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    derandomize=True,
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("suite")

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_outcomes: dict = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    k = int(m.group(1))
    if report.when == "call":
        _outcomes[k] = report.passed
    elif report.failed or report.skipped:
        # setup errors and skips both count as a failed criterion
        _outcomes[k] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _outcomes:
        return
    terminalreporter.section("acceptance")
    for k in sorted(_outcomes):
        verdict = "PASS" if _outcomes[k] else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {k} {verdict}")
