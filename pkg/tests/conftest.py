import numpy as np
import pytest

from wentzell import assemble_operators, build_disk_mesh


@pytest.fixture(scope="session")
def mesh():
    return build_disk_mesh(16, 48)


@pytest.fixture(scope="session")
def small_mesh():
    return build_disk_mesh(6, 16)


@pytest.fixture(scope="session")
def tiny_mesh():
    return build_disk_mesh(1, 4)


@pytest.fixture(scope="session")
def ops_by_a(mesh):
    return {a: assemble_operators(mesh, a) for a in (0.25, 0.5, 1.0, 4.0)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
