import numpy as np
import pytest

from feederkron.generate import GenParams, generate
from feederkron.grid import BALANCED_SLACK, Branch, Network, Node, PhaseMask

I3 = np.eye(3, dtype=complex)


def build(n, edges, phases=None, y_block=I3):
    """Network with slack 0 and unit-admittance (or given) branches."""
    phases = phases or {}
    nodes = [Node(0, PhaseMask.full(), True, BALANCED_SLACK.copy())]
    nodes += [Node(k, PhaseMask.parse(phases.get(k, "abc"))) for k in range(1, n)]
    branches = []
    for a, b in edges:
        mask = PhaseMask.parse(phases.get(b, "abc"))
        y = np.zeros((3, 3), dtype=complex)
        idx = mask.indices
        y[np.ix_(idx, idx)] = np.asarray(y_block)[np.ix_(idx, idx)]
        branches.append(Branch(a, b, y))
    return Network(nodes, branches)


def chain(n, **kw):
    return build(n, [(k, k + 1) for k in range(n - 1)], **kw)


def star():
    """Hub 3 with leaves 1, 2 and 4; the slack 0 hangs off leaf 1."""
    return build(5, [(0, 1), (1, 3), (3, 2), (3, 4)])


@pytest.fixture
def two_node():
    return chain(2)


@pytest.fixture(scope="session")
def feeder60():
    return generate(GenParams(n=60, seed=3))


@pytest.fixture(scope="session")
def feeder100():
    return generate(GenParams(n=100, seed=7))


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
