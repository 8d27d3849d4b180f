"""Compiled inner loop of the jump-chain simulator."""

import numpy as np
from numba import njit


@njit(cache=True)
def run_until_arrivals(indptr, targets, cumprob, is_arrival, observed, state, wanted,
                       uniforms, counts):
    """Advance the jump chain until `wanted` arrivals or the uniforms run out.

    At every arrival epoch the row ``observed[state]`` (0/1 per event) is
    added to `counts` before the transition is applied.  Returns the final
    state and the number of arrivals seen.
    """
    seen = 0
    k = 0
    n_events = observed.shape[1]
    n_u = uniforms.shape[0]
    while seen < wanted and k < n_u:
        u = uniforms[k]
        k += 1
        slot = indptr[state]
        last = indptr[state + 1] - 1
        while slot < last and u >= cumprob[slot]:
            slot += 1
        if is_arrival[slot]:
            for ev in range(n_events):
                counts[ev] += observed[state, ev]
            seen += 1
        state = targets[slot]
    return state, seen


def warm_up():
    """Compile the kernel on a one-state chain."""
    indptr = np.array([0, 1], dtype=np.int64)
    run_until_arrivals(
        indptr,
        np.zeros(1, dtype=np.int64),
        np.ones(1),
        np.ones(1, dtype=np.bool_),
        np.zeros((1, 1), dtype=np.int64),
        0,
        1,
        np.zeros(1),
        np.zeros(1, dtype=np.int64),
    )
