"""Limit probabilities of precise and imprecise chains.

Three routes are provided:

* :func:`limit_lower_probability` / :func:`limit_upper_probability` iterate
  ``g <- g + delta * Q_lower g`` until the variation of ``g`` is small
  relative to its midpoint.  With a single-member operator this is the
  precise iteration.
* :func:`stationary_by_linear_solve` solves the balance equations with the
  last column replaced by the normalisation constraint.
* :func:`gillespie_blocking_estimate` simulates the jump chain and estimates
  event probabilities at arrival epochs with batch means.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import stats

from . import _jumpchain
from .exceptions import NonFiniteValue, SingularSystem, StepTooLarge, ToleranceNotMet
from .generators import ARRIVAL1, ARRIVAL2, DIAGONAL
from .operators import LowerOperator

log = logging.getLogger(__name__)

DEFAULT_PHI = 1e-3
DEFAULT_MAX_ITERS = 10**6
LINEAR_TOL = 1e-10
# slack for rounding when checking that iterates stay in range
_RANGE_SLACK = 1e-12


@dataclass(frozen=True)
class IterationParams:
    """Step size, relative tolerance and iteration cap for the iterative solver.

    ``delta=None`` picks ``0.9 * 2 / norm`` for a precise operator and
    ``1 / (2 * norm)`` for an imprecise one.
    """

    delta: float | None = None
    phi: float = DEFAULT_PHI
    max_iters: int = DEFAULT_MAX_ITERS

    def __post_init__(self):
        if self.delta is not None and not self.delta > 0:
            raise StepTooLarge(f"delta must be positive, got {self.delta}")
        if not self.phi > 0:
            raise ValueError(f"phi must be positive, got {self.phi}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    def step_for(self, op) -> float:
        if self.delta is not None:
            delta = self.delta
        elif op.norm == 0:
            delta = 1.0
        elif op.is_precise:
            delta = 0.9 * 2.0 / op.norm
        else:
            delta = 1.0 / (2.0 * op.norm)
        if op.norm > 0 and delta >= 2.0 / op.norm:
            raise StepTooLarge(f"delta={delta} is not below 2/norm = {2.0 / op.norm}")
        return delta

    def halved(self, op):
        return IterationParams(self.step_for(op) / 2, self.phi, self.max_iters)


@dataclass(frozen=True)
class BoundResult:
    """Outcome of one iterative run.

    Attributes
    ----------
    value : float
        Midpoint of the final iterate (the lower or upper limit probability).
    iterations : int
    converged : bool
        False when the iteration cap was hit before the tolerance was met.
    residual_variation : float
        Variation norm of the final iterate.
    guaranteed_abs_error : float
        Guaranteed bound on the absolute error, see
        :func:`guaranteed_error_bound`.
    delta : float
        Step size that was used.
    """

    value: float
    iterations: int
    converged: bool
    residual_variation: float
    guaranteed_abs_error: float | None = None
    delta: float | None = None


def variation(f) -> float:
    return (float(np.max(f)) - float(np.min(f))) / 2.0


def midpoint(f) -> float:
    return (float(np.max(f)) + float(np.min(f))) / 2.0


def _as_mask(event, n):
    mask = getattr(event, "mask", event)
    if callable(mask) and not isinstance(mask, np.ndarray):
        raise TypeError("pass a boolean mask or a BlockingEvent bound to a space")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ValueError(f"event mask has shape {mask.shape}, expected ({n},)")
    return mask


def _as_operator(op):
    if isinstance(op, LowerOperator):
        return op
    return LowerOperator([op])


def _iterate(op, g, params):
    delta = params.step_for(op)
    lo, hi = float(np.min(g)), float(np.max(g))
    slack = _RANGE_SLACK * max(1.0, abs(lo), abs(hi))
    v = variation(g)
    var_sum = 0.0
    it = 0
    while v > params.phi * abs(midpoint(g)) and it < params.max_iters:
        var_sum += v
        g = g + delta * op.apply_lower(g)
        it += 1
        gmin, gmax = float(np.min(g)), float(np.max(g))
        if not (math.isfinite(gmin) and math.isfinite(gmax)):
            raise NonFiniteValue(f"iterate {it} is not finite (delta={delta})")
        if gmin < lo - slack or gmax > hi + slack:
            raise NonFiniteValue(
                f"iterate {it} left [{lo}, {hi}]: delta={delta} is outside the stable range"
            )
        v = (gmax - gmin) / 2.0
    converged = v <= params.phi * abs(midpoint(g))
    if not converged:
        log.warning("%s: no convergence after %d iterations (variation %.3g)", op.tag, it, v)
    eps = _error_bound_from_sum(var_sum, v, delta, op.norm)
    return g, it, converged, v, eps, delta


def limit_lower_probability(op, event, params=None) -> BoundResult:
    """Lower limit probability of `event` under the operator `op`.

    Parameters
    ----------
    op : LowerOperator or Generator
        A bare generator is treated as a single-member operator.
    event : array_like of bool or BlockingEvent
    params : IterationParams, optional

    Raises
    ------
    StepTooLarge
        If the step size is not below ``2 / norm``.
    NonFiniteValue
        If the iteration blows up.
    """
    op = _as_operator(op)
    params = params or IterationParams()
    g0 = _as_mask(event, op.n).astype(float)
    g, it, ok, v, eps, delta = _iterate(op, g0, params)
    return BoundResult(midpoint(g), it, ok, v, eps, delta)


def limit_upper_probability(op, event, params=None) -> BoundResult:
    """Upper limit probability: the same iteration started from ``-1_A``."""
    op = _as_operator(op)
    params = params or IterationParams()
    g0 = -_as_mask(event, op.n).astype(float)
    g, it, ok, v, eps, delta = _iterate(op, g0, params)
    return BoundResult(midpoint(-g), it, ok, v, eps, delta)


def _error_bound_from_sum(var_sum, last, delta, norm):
    return max(2.0 * delta**2 * norm**2 * var_sum, last)


def guaranteed_error_bound(trace, delta, norm) -> float:
    """Guaranteed absolute error of the iterative estimate.

    Parameters
    ----------
    trace : sequence of float
        Variation norms of ``g_0, ..., g_n``.
    delta : float
    norm : float
        Norm of the lower operator.

    Returns
    -------
    float
        ``max(2 delta^2 norm^2 sum_{i<n} trace[i], trace[n])``.
    """
    trace = list(trace)
    if not trace:
        raise ValueError("trace must not be empty")
    return _error_bound_from_sum(math.fsum(trace[:-1]), trace[-1], delta, norm)


class StepHalving(NamedTuple):
    value_delta: float
    value_half_delta: float
    passed: bool
    converged: bool


def step_halving_check(op, event, params=None, upper=False) -> StepHalving:
    """Run the iteration with ``delta`` and ``delta / 2`` and compare.

    Passes when ``|v1 - v2| < phi * |v2|``; both runs must also have met the
    tolerance.  Numerical failures of either run give ``passed=False``
    rather than an exception.
    """
    op = _as_operator(op)
    params = params or IterationParams()
    solve = limit_upper_probability if upper else limit_lower_probability
    try:
        first = solve(op, event, params)
        second = solve(op, event, params.halved(op))
    except (StepTooLarge, NonFiniteValue) as exc:
        log.info("step halving aborted: %s", exc)
        return StepHalving(math.nan, math.nan, False, False)
    v1, v2 = first.value, second.value
    close = abs(v1 - v2) < params.phi * abs(v2) or v1 == v2
    converged = first.converged and second.converged
    return StepHalving(v1, v2, bool(close and converged), converged)


def stationary_by_linear_solve(gen, tol=LINEAR_TOL):
    """Stationary distribution of an irreducible generator.

    Solves ``pi R = b`` where ``R`` is the generator with its last column
    replaced by ones and ``b`` is the last unit vector.  The ones column is
    eliminated first: with ``pi[-1]`` fixed to 1 the remaining unknowns solve
    a system in the leading principal block of the generator, which keeps
    the LU factors sparse; the result is then scaled to sum to one and
    checked against the full modified system.

    Raises
    ------
    SingularSystem
        When the system is singular, which happens for reducible input.
    ToleranceNotMet
        When the solution is not a probability vector within `tol` or its
        residual exceeds `tol`.
    """
    Q = gen.matrix if hasattr(gen, "matrix") else sp.csr_matrix(gen)
    Q = sp.csc_matrix(Q, dtype=float)
    n = Q.shape[0]
    if n == 1:
        return np.ones(1)
    lead = Q[: n - 1, : n - 1].T.tocsc()
    rhs = -Q[n - 1, : n - 1].toarray().ravel()
    try:
        lu = spla.splu(lead, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SingularSystem(f"singular balance system: {exc}") from None
    with np.errstate(all="ignore"):
        pi = np.append(lu.solve(rhs), 1.0)
        pi = pi / pi.sum()
    if not np.all(np.isfinite(pi)):
        raise SingularSystem("singular balance system: non-finite solution")
    # residual of pi R = b, column by column
    balance = Q.T @ pi
    resid = max(float(np.max(np.abs(balance[: n - 1]))), abs(pi.sum() - 1.0))
    if resid >= tol:
        raise ToleranceNotMet(f"residual {resid:.3g} is not below {tol}")
    if np.min(pi) < -tol:
        raise ToleranceNotMet(f"negative probability {np.min(pi):.3g}")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def event_probability(pi, event) -> float:
    return float(np.sum(pi[_as_mask(event, len(pi))]))


# --------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class SimulationParams:
    """Batch-means settings for :func:`gillespie_blocking_estimate`.

    Attributes
    ----------
    batch_arrivals : int
        Arrival epochs per batch.
    min_batches, max_batches : int
    phi : float
        Stop once every event's CI width divided by its mean is below this.
    seed : int
        Seed of the numpy PCG64 generator that drives the simulation.
    confidence : float
    max_warmup_windows : int
        Cap on the number of warm-up windows.
    """

    batch_arrivals: int = 10**6
    min_batches: int = 5
    max_batches: int = 50
    phi: float = DEFAULT_PHI
    seed: int = 0
    confidence: float = 0.95
    max_warmup_windows: int = 10

    def __post_init__(self):
        if self.batch_arrivals < 1:
            raise ValueError("batch_arrivals must be positive")
        if self.min_batches < 2:
            raise ValueError("min_batches must be at least 2")
        if self.max_batches < self.min_batches:
            raise ValueError("max_batches must not be below min_batches")
        if not self.phi > 0:
            raise ValueError("phi must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")


@dataclass(frozen=True)
class SimulationEstimate:
    mean: float
    ci_halfwidth: float
    batches: int
    zero_mean: bool
    batch_means: tuple = field(repr=False, default=())

    @property
    def relative_error(self) -> float:
        if self.zero_mean:
            return math.inf
        return 2.0 * self.ci_halfwidth / self.mean

    def covers(self, value) -> bool:
        return abs(value - self.mean) <= self.ci_halfwidth


def _jump_tables(gen, scenario):
    """Per-state transition slots, including self-loops for blocked arrivals."""
    if gen.kinds is None:
        raise ValueError("simulation needs a generator that records transition kinds")
    Q = gen.matrix
    n = Q.shape[0]
    rows = np.repeat(np.arange(n), np.diff(Q.indptr))
    off = gen.kinds != DIAGONAL
    r, c, rate, kind = rows[off], Q.indices[off], Q.data[off], gen.kinds[off]
    acc1 = np.bincount(r[kind == ARRIVAL1], weights=rate[kind == ARRIVAL1], minlength=n)
    acc2 = np.bincount(r[kind == ARRIVAL2], weights=rate[kind == ARRIVAL2], minlength=n)
    blocked = np.clip(float(scenario.lambda1) - acc1, 0.0, None)
    blocked += np.clip(float(scenario.lambda2) - acc2, 0.0, None)
    # drop rounding residue of fully accepted arrivals
    blocked[blocked < 1e-12 * (float(scenario.lambda1) + float(scenario.lambda2))] = 0.0

    has_blocked = blocked > 0
    br = np.flatnonzero(has_blocked)
    r = np.concatenate([r, br])
    c = np.concatenate([c, br])
    rate = np.concatenate([rate, blocked[has_blocked]])
    arrival = np.concatenate([(kind == ARRIVAL1) | (kind == ARRIVAL2), np.ones(len(br), bool)])
    order = np.lexsort((c, r))
    r, c, rate, arrival = r[order], c[order], rate[order], arrival[order]

    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=n), out=indptr[1:])
    if np.any(np.diff(indptr) == 0):
        raise ValueError("the chain has an absorbing state")
    total = np.bincount(r, weights=rate, minlength=n)
    cum = np.cumsum(rate)
    row_start = np.concatenate([[0.0], cum[indptr[1:-1] - 1]])
    cumprob = (cum - row_start[r]) / total[r]
    cumprob[indptr[1:] - 1] = 1.0
    return indptr, c.astype(np.int64), cumprob, arrival


def _t_halfwidth(batch_means, confidence):
    k = len(batch_means)
    sd = float(np.std(batch_means, ddof=1))
    return float(stats.t.ppf(0.5 + confidence / 2, k - 1)) * sd / math.sqrt(k)


class _Runner:
    def __init__(self, tables, observed, start, rng):
        self.indptr, self.targets, self.cumprob, self.arrival = tables
        self.observed = observed
        self.state = start
        self.rng = rng

    def window(self, arrivals):
        counts = np.zeros(self.observed.shape[1], dtype=np.int64)
        need = arrivals
        while need > 0:
            chunk = int(min(max(4 * need, 1024), 1 << 22))
            u = self.rng.random(chunk)
            self.state, seen = _jumpchain.run_until_arrivals(
                self.indptr, self.targets, self.cumprob, self.arrival,
                self.observed, self.state, need, u, counts,
            )
            need -= seen
        return counts / arrivals


def gillespie_blocking_estimate(gen, scenario, events: Mapping[str, object], params=None,
                                start=None) -> dict:
    """Estimate event probabilities by simulating the jump chain.

    Every arrival epoch, accepted or blocked, is an observation (Poisson
    arrivals see time averages).  Blocked arrivals are self-loops of the
    jump chain, so no holding times need to be drawn.

    Warm-up: one full window of ``batch_arrivals`` arrivals is discarded,
    then further windows are discarded until two consecutive windows agree
    within 10% (relative) on every event frequency, or until
    ``max_warmup_windows`` is reached.  Batches follow; the run stops after at
    least ``min_batches`` once every event has CI width / mean below
    ``phi``, and in any case after ``max_batches``.  Confidence intervals use
    the Student t quantile over the batch means.

    Parameters
    ----------
    gen : Generator
        Must carry transition kinds (all builders in this package do).
    scenario : Scenario
    events : mapping of name to boolean mask (or BlockingEvent)
    params : SimulationParams, optional
    start : int, optional
        Initial state index; defaults to the empty link.

    Returns
    -------
    dict of str to SimulationEstimate
        An event never observed gets ``zero_mean=True`` and an infinite
        relative error.
    """
    params = params or SimulationParams()
    names = list(events)
    observed = np.column_stack(
        [_as_mask(events[k], gen.n).astype(np.int64) for k in names]
    )
    tables = _jump_tables(gen, scenario)
    if start is None:
        start = gen.space.empty_index
    runner = _Runner(tables, observed, int(start), np.random.default_rng(params.seed))

    prev = runner.window(params.batch_arrivals)
    for _ in range(params.max_warmup_windows - 1):
        cur = runner.window(params.batch_arrivals)
        scale = np.maximum(np.abs(prev), np.abs(cur))
        settled = np.all(np.abs(cur - prev) <= 0.1 * scale)
        prev = cur
        if settled:
            break

    batches = []
    while len(batches) < params.max_batches:
        batches.append(runner.window(params.batch_arrivals))
        if len(batches) >= params.min_batches:
            arr = np.array(batches)
            means = arr.mean(axis=0)
            hw = np.array([_t_halfwidth(arr[:, k], params.confidence) for k in range(len(names))])
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(means > 0, 2 * hw / means, np.inf)
            if np.all(rel < params.phi):
                break

    arr = np.array(batches)
    out = {}
    for k, name in enumerate(names):
        col = arr[:, k]
        mean = float(col.mean())
        out[name] = SimulationEstimate(
            mean=mean,
            ci_halfwidth=_t_halfwidth(col, params.confidence),
            batches=len(col),
            zero_mean=mean == 0.0,
            batch_means=tuple(float(v) for v in col),
        )
    return out
