import logging

import pytest

from trapcal.core import default_layout
from trapcal.synthetic import DEFAULT_STRAY, NOISELESS, build_truth, generate_dataset, reference_protocol

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def layout():
    return default_layout()


@pytest.fixture(scope="session")
def truth(layout):
    return build_truth(layout, DEFAULT_STRAY)


@pytest.fixture(scope="session")
def plan(truth):
    return reference_protocol(truth)


@pytest.fixture(scope="session")
def noiseless(truth, plan):
    return generate_dataset(truth, plan, noise=NOISELESS)


@pytest.fixture(scope="session")
def opt_noiseless(noiseless, layout):
    from trapcal.calibrate_opt import calibrate_optimization

    return calibrate_optimization(noiseless, layout)


@pytest.fixture
def report_line():
    """Record one acceptance line; the lines are echoed in the terminal summary."""

    def add(line: str):
        ACCEPTANCE_LINES.append(line)
        print(line)

    return add


def pytest_configure(config):
    logging.getLogger("trapcal").setLevel(logging.ERROR)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
