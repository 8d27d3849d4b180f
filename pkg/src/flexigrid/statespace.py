"""Detailed and reduced state spaces of the link, and the map between them.

A detailed state is an integer tuple ``(i_0, ..., i_n2)`` where ``i_k`` counts
the superchannels holding exactly ``k`` type 1 flows and no type 2 flow.  A
reduced state is the triplet ``(i, j, e)``: allocated type 1 flows, allocated
type 2 flows and free superchannels.

Both spaces are materialised as lexicographically sorted integer arrays.  The
position of a state is found by encoding each row as a mixed-radix integer
and binary searching the sorted codes.
"""

from __future__ import annotations

from functools import lru_cache
from math import comb
from typing import NamedTuple

import numpy as np

from .exceptions import CapacityExceeded, InvariantViolation, NotInvertible

DEFAULT_MAX_STATES = 10**7

DETAILED = "detailed"
REDUCED = "reduced"


class ReducedState(NamedTuple):
    i: int
    j: int
    e: int


class StateSpace:
    """An enumerated, indexed state space.

    Parameters
    ----------
    states : ndarray of shape (n, d)
        Lexicographically sorted, duplicate-free rows of non-negative ints.
    kind : {'detailed', 'reduced'}
    scenario : Scenario
    """

    def __init__(self, states, kind, scenario):
        states = np.ascontiguousarray(states, dtype=np.int64)
        states.setflags(write=False)
        self.states = states
        self.kind = kind
        self.scenario = scenario
        self._base = int(states.max()) + 1 if states.size else 1
        if self._base ** states.shape[1] >= 2**62:
            raise CapacityExceeded(
                "state components too large for the integer index", len(states)
            )
        self._weights = self._base ** np.arange(states.shape[1] - 1, -1, -1, dtype=np.int64)
        self._codes = states @ self._weights
        if len(self._codes) > 1 and not np.all(np.diff(self._codes) > 0):
            raise InvariantViolation("states are not strictly lexicographically sorted")

    def __len__(self):
        return len(self.states)

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k):
        row = tuple(int(v) for v in self.states[k])
        return ReducedState(*row) if self.kind == REDUCED else row

    def __contains__(self, state):
        return self.locate(np.asarray([state]))[0] >= 0

    def __repr__(self):
        return f"StateSpace(kind={self.kind!r}, n={len(self)}, m1={self.scenario.m1}, n2={self.scenario.n2})"

    def index(self, state) -> int:
        """Position of `state`; raises ``KeyError`` if it is not in the space."""
        pos = int(self.locate(np.asarray([state]))[0])
        if pos < 0:
            raise KeyError(state)
        return pos

    def locate(self, rows):
        """Vectorised :meth:`index`: positions of `rows`, or -1 where absent."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.ndim == 1:
            rows = rows[None, :]
        out = np.full(len(rows), -1, dtype=np.int64)
        if len(rows) == 0 or len(self) == 0:
            return out
        valid = np.all((rows >= 0) & (rows < self._base), axis=1)
        codes = rows[valid] @ self._weights
        pos = np.searchsorted(self._codes, codes)
        pos_clipped = np.minimum(pos, len(self._codes) - 1)
        hit = self._codes[pos_clipped] == codes
        found = np.where(hit, pos_clipped, -1)
        out[valid] = found
        return out

    @property
    def empty_index(self) -> int:
        """Position of the state with nothing allocated."""
        m2 = self.scenario.m2
        if self.kind == DETAILED:
            return self.index((m2,) + (0,) * self.scenario.n2)
        return self.index((0, 0, m2))


def detailed_count(m2, n2) -> int:
    """Closed-form size of the detailed space."""
    return comb(m2 + n2 + 1, n2 + 1)


def reduced_count(m1, n2) -> int:
    """Size of the reduced space, by summing over (j, e)."""
    m2 = m1 // n2
    total = 0
    for j in range(m2 + 1):
        for e in range(m2 - j + 1):
            lo = m2 - j - e
            hi = m1 - (j + e) * n2
            if hi >= lo:
                total += hi - lo + 1
    return total


def _check_capacity(count, max_states, what):
    limit = DEFAULT_MAX_STATES if max_states is None else max_states
    if count > limit:
        raise CapacityExceeded(
            f"{what} state space has {count} states, above the limit of {limit}",
            count=count,
            limit=limit,
        )


@lru_cache(maxsize=64)
def _bounded_compositions(parts, total):
    # all rows of `parts` non-negative ints with sum <= total, lexicographic
    if parts == 1:
        return np.arange(total + 1, dtype=np.int64)[:, None]
    blocks = []
    for first in range(total + 1):
        tail = _bounded_compositions(parts - 1, total - first)
        head = np.full((len(tail), 1), first, dtype=np.int64)
        blocks.append(np.hstack([head, tail]))
    out = np.vstack(blocks)
    out.setflags(write=False)
    return out


def enumerate_detailed(scenario, max_states=None) -> StateSpace:
    """Every ``(i_0, ..., i_n2)`` with ``sum(i_k) <= m2``.

    Raises
    ------
    CapacityExceeded
        Before allocating anything, if the closed-form count exceeds
        `max_states` (default :data:`DEFAULT_MAX_STATES`).
    """
    m2, n2 = scenario.m2, scenario.n2
    _check_capacity(detailed_count(m2, n2), max_states, "detailed")
    states = np.array(_bounded_compositions(n2 + 1, m2))
    _bounded_compositions.cache_clear()
    return StateSpace(states, DETAILED, scenario)


def enumerate_reduced(scenario, max_states=None) -> StateSpace:
    """Every ``(i, j, e)`` with ``m2 <= i + j + e`` and ``i + (j + e) n2 <= m1``."""
    m1, n2, m2 = scenario.m1, scenario.n2, scenario.m2
    _check_capacity(reduced_count(m1, n2), max_states, "reduced")
    blocks = []
    for j in range(m2 + 1):
        for e in range(m2 - j + 1):
            lo, hi = m2 - j - e, m1 - (j + e) * n2
            if hi < lo:
                continue
            i = np.arange(lo, hi + 1, dtype=np.int64)
            blocks.append(np.column_stack([i, np.full_like(i, j), np.full_like(i, e)]))
    states = np.vstack(blocks)
    order = np.lexsort(states.T[::-1])
    return StateSpace(states[order], REDUCED, scenario)


def gamma_many(detailed, m2):
    """Row-wise reduction of an ``(n, n2 + 1)`` array of detailed states."""
    d = np.asarray(detailed, dtype=np.int64)
    k = np.arange(d.shape[1], dtype=np.int64)
    return np.column_stack([d @ k, m2 - d.sum(axis=1), d[:, 0]])


def gamma(d, scenario) -> ReducedState:
    """Map a detailed state onto the reduced state it represents."""
    if len(d) != scenario.n2 + 1:
        raise ValueError(f"expected {scenario.n2 + 1} components, got {len(d)}")
    i = sum(k * ik for k, ik in enumerate(d))
    return ReducedState(int(i), int(scenario.m2 - sum(d)), int(d[0]))


def gamma_inverse(r, scenario) -> tuple:
    """Inverse of :func:`gamma`; only defined for two-channel superchannels."""
    if scenario.n2 != 2:
        raise NotInvertible(f"gamma is only invertible for n2 = 2, not {scenario.n2}")
    i, j, e = r
    m2 = scenario.m2
    return (int(e), int(2 * m2 - i - 2 * j - 2 * e), int(i + j + e - m2))


def gamma_index_map(detailed: StateSpace, reduced: StateSpace):
    """Position in `reduced` of the image of every detailed state."""
    pos = reduced.locate(gamma_many(detailed.states, detailed.scenario.m2))
    if np.any(pos < 0):
        raise InvariantViolation("gamma produced a state outside the reduced space")
    return pos
