import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "dtnet",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("dtnet")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}
CRITERIA = {
    1: "gradient suite",
    2: "flip algebra",
    3: "threshold properties",
    4: "metric oracle",
    5: "parameter accounting",
    6: "desk-scale training",
    7: "harness completeness",
    8: "serialization",
}


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in CRITERIA.items():
        if number in _ACCEPTANCE:
            passed, detail = _ACCEPTANCE[number]
            status = "PASS" if passed else "FAIL"
        else:
            status, detail = "NOT RUN", "test errored or was deselected before reporting"
        terminalreporter.write_line(f"criterion {number} ({title}): {status}: {detail}")
