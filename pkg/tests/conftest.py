import numpy as np
import pytest

from rflab.interpolant import Schedule, ScheduleKind

SCHEDULES = [Schedule(ScheduleKind.RECTIFIED_FLOW), Schedule(ScheduleKind.CONDITIONAL_FLOW_MATCHING)]


@pytest.fixture(params=SCHEDULES, ids=lambda s: s.kind.value)
def sched(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run regardless of capture
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
