import numpy as np
import pytest
import scipy.sparse as sp

from flexigrid.generators import Generator

# filled in by test_acceptance, printed at the end of the session
ACCEPTANCE_LINES = {}


class PlainSpace:
    """Bare index set for hand-built chains in tests."""

    kind = "plain"

    def __init__(self, n):
        self.n = n

    def __len__(self):
        return self.n


def chain(offdiag, tag="test"):
    """Generator from a dense matrix of off-diagonal rates."""
    Q = np.array(offdiag, dtype=float)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    m = sp.csr_matrix(Q)
    m.sort_indices()
    return Generator(m, PlainSpace(len(Q)), tag)


def two_state(a, b):
    return chain([[0, a], [b, 0]], tag=f"two-state({a},{b})")


def reachable(adj):
    """Boolean transitive-reflexive closure by repeated squaring."""
    R = (np.asarray(adj) > 0) | np.eye(len(adj), dtype=bool)
    while True:
        nxt = (R.astype(np.int64) @ R.astype(np.int64)) > 0
        if np.array_equal(nxt, R):
            return R
        R = nxt


@pytest.fixture
def two_state_chain():
    return two_state


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
