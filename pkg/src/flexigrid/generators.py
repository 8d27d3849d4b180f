"""Transition rate matrices of the exact, approximate and imprecise link models.

Every builder returns a :class:`Generator`: a CSR matrix over a
:class:`~flexigrid.statespace.StateSpace` together with a per-entry code
telling which entries are type 1 arrivals, type 2 arrivals or departures
(the simulator needs this to observe the system at arrival epochs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from math import comb

import numpy as np
import scipy.sparse as sp

from .exceptions import InvariantViolation
from .statespace import DETAILED, REDUCED, enumerate_detailed, enumerate_reduced

DIAGONAL, ARRIVAL1, ARRIVAL2, DEPARTURE = 0, 1, 2, 3

ROW_SUM_TOL = 1e-12
MAX_REDUCED_ROW_NNZ = 7


class Policy(str, Enum):
    """Spectrum allocation policy for type 1 requests."""

    RA = "RA"
    LF = "LF"
    MF = "MF"


class ReducedModel(str, Enum):
    """Reduced-space model families; LF and MF share the LM model."""

    RA = "RA"
    LM = "LM"
    PI = "PI"


@dataclass(frozen=True, eq=False)
class Generator:
    """A transition rate matrix over an enumerated state space.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix
        Canonical CSR matrix (sorted indices, no duplicates), diagonal stored.
    space : StateSpace
    tag : str
        Model label used in dumps and reports, e.g. ``"exact-RA"``.
    kinds : ndarray of int8 or None
        Transition kind for every stored entry, aligned with ``matrix.data``.
    """

    matrix: sp.csr_matrix
    space: object
    tag: str
    kinds: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.space)
        if self.matrix.shape != (n, n):
            raise InvariantViolation(
                f"matrix shape {self.matrix.shape} does not match {n} states"
            )
        if self.kinds is not None and len(self.kinds) != self.matrix.nnz:
            raise InvariantViolation("kinds are not aligned with the stored entries")
        check_generator(self.matrix)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def diagonal(self):
        return self.matrix.diagonal()

    def rate(self, x, y) -> float:
        """Rate of the transition between two states given as tuples."""
        return float(self.matrix[self.space.index(x), self.space.index(y)])

    def toarray(self):
        return self.matrix.toarray()

    def dump(self, fh):
        """Write the matrix as ``row col rate`` triplets to a text stream."""
        coo = self.matrix.tocoo()
        fh.write(f"# states={self.n} model={self.tag}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")


def load_triplets(fh, space, tag=None) -> Generator:
    """Read a matrix written by :meth:`Generator.dump`."""
    header = fh.readline().split()
    if not header or header[0] != "#":
        raise ValueError("missing '# states=<n> model=<tag>' header")
    fields = dict(tok.split("=", 1) for tok in header[1:])
    n = int(fields["states"])
    if n != len(space):
        raise ValueError(f"dump has {n} states, space has {len(space)}")
    rows, cols, vals = [], [], []
    for line in fh:
        if not line.strip():
            continue
        r, c, v = line.split()
        rows.append(int(r))
        cols.append(int(c))
        vals.append(float(v))
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    matrix.sort_indices()
    return Generator(matrix, space, tag or fields.get("model", ""))


def check_generator(matrix, tol=ROW_SUM_TOL):
    """Raise :class:`InvariantViolation` unless `matrix` is a transition rate matrix.

    Off-diagonal entries must be non-negative and each row must sum to zero
    within ``tol * max(1, |diagonal|)``.
    """
    coo = matrix.tocoo()
    off = coo.row != coo.col
    if np.any(coo.data[off] < 0):
        bad = np.flatnonzero(off & (coo.data < 0))[0]
        raise InvariantViolation(
            f"negative off-diagonal rate {coo.data[bad]} at ({coo.row[bad]}, {coo.col[bad]})"
        )
    if not np.all(np.isfinite(coo.data)):
        raise InvariantViolation("non-finite rate")
    sums = np.asarray(matrix.sum(axis=1)).ravel()
    scale = np.maximum(1.0, np.abs(matrix.diagonal()))
    bad = np.abs(sums) > tol * scale
    if np.any(bad):
        x = int(np.flatnonzero(bad)[0])
        raise InvariantViolation(f"row {x} sums to {sums[x]!r}, not 0")


def _assemble(space, parts, diagonal, tag) -> Generator:
    # parts: iterable of (rows, target_rows_array, rates, kind)
    n = len(space)
    rows, cols, rates, kinds = [], [], [], []
    for src, targets, rate, kind in parts:
        rate = np.broadcast_to(np.asarray(rate, dtype=float), src.shape)
        keep = rate > 0
        if not np.any(keep):
            continue
        src, targets, rate = src[keep], targets[keep], rate[keep]
        dst = space.locate(targets)
        if np.any(dst < 0):
            bad = int(np.flatnonzero(dst < 0)[0])
            raise InvariantViolation(
                f"{tag}: positive rate from {space[int(src[bad])]} to infeasible "
                f"state {tuple(int(v) for v in targets[bad])}"
            )
        rows.append(src)
        cols.append(dst)
        rates.append(rate)
        kinds.append(np.full(len(src), kind, dtype=np.int8))
    idx = np.arange(n, dtype=np.int64)
    rows.append(idx)
    cols.append(idx)
    rates.append(np.asarray(diagonal, dtype=float))
    kinds.append(np.full(n, DIAGONAL, dtype=np.int8))

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    rates = np.concatenate(rates)
    kinds = np.concatenate(kinds)
    order = np.lexsort((cols, rows))
    rows, cols, rates, kinds = rows[order], cols[order], rates[order], kinds[order]
    dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
    if np.any(dup):
        k = int(np.flatnonzero(dup)[0])
        raise InvariantViolation(f"{tag}: two transitions share entry ({rows[k]}, {cols[k]})")
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    matrix = sp.csr_matrix((rates, cols, indptr), shape=(n, n))
    return Generator(matrix, space, tag, kinds)


def _unit(d, k):
    u = np.zeros(d, dtype=np.int64)
    u[k] = 1
    return u


# --------------------------------------------------------------------------
# exact model on the detailed space


def build_exact(scenario, policy, space=None, state_cap=None) -> Generator:
    """Exact generator of the link under `policy` on the detailed space.

    Parameters
    ----------
    scenario : Scenario
    policy : Policy or str
        ``"RA"``, ``"LF"`` or ``"MF"``.
    space : StateSpace, optional
        A previously enumerated detailed space for `scenario`.
    state_cap : int, optional
        Passed to :func:`~flexigrid.statespace.enumerate_detailed` as the
        state limit.
    """
    policy = Policy(policy)
    if space is None:
        space = enumerate_detailed(scenario, max_states=state_cap)
    elif space.kind != DETAILED:
        raise ValueError("build_exact needs the detailed state space")
    S = space.states
    n2, m2 = scenario.n2, scenario.m2
    lam1, lam2 = float(scenario.lambda1), float(scenario.lambda2)
    mu1, mu2 = float(scenario.mu1), float(scenario.mu2)
    d = n2 + 1
    idx = np.arange(len(S), dtype=np.int64)
    I = S.sum(axis=1)
    R = S[:, :n2] @ (n2 - np.arange(n2))

    parts = []
    m = S[:, 0] > 0
    parts.append((idx[m], S[m] - _unit(d, 0), lam2, ARRIVAL2))
    m = I < m2
    parts.append((idx[m], S[m] + _unit(d, 0), (m2 - I[m]) * mu2, DEPARTURE))
    for k in range(1, n2 + 1):
        m = S[:, k] > 0
        step = _unit(d, k - 1) - _unit(d, k)
        parts.append((idx[m], S[m] + step, k * S[m, k] * mu1, DEPARTURE))

    free = R > 0
    if policy is Policy.RA:
        for k in range(n2):
            m = free & (S[:, k] > 0)
            step = _unit(d, k + 1) - _unit(d, k)
            rate = lam1 * (S[m, k] * (n2 - k)) / R[m]
            parts.append((idx[m], S[m] + step, rate, ARRIVAL1))
    else:
        partial = S[:, 1:n2] > 0
        has_partial = partial.any(axis=1)
        if policy is Policy.LF:
            k_ap = np.where(has_partial, np.argmax(partial, axis=1) + 1, 0)
        else:
            last = n2 - 2 - np.argmax(partial[:, ::-1], axis=1)
            k_ap = np.where(has_partial, last + 1, 0)
        m = free
        step = np.zeros((len(S), d), dtype=np.int64)
        rows = np.flatnonzero(m)
        step[rows, k_ap[m]] -= 1
        step[rows, k_ap[m] + 1] += 1
        parts.append((idx[m], S[m] + step[m], lam1, ARRIVAL1))

    ksum = S @ np.arange(d)
    diagonal = -(lam2 * (S[:, 0] > 0) + (m2 - I) * mu2 + ksum * mu1 + lam1 * free)
    return _assemble(space, parts, diagonal, f"exact-{policy.value}")


# --------------------------------------------------------------------------
# reduced space: bounds, estimate, and the generic builder


@dataclass(frozen=True)
class RateBounds:
    """Bounds on the two imprecise rates of a reduced state.

    ``mu1_plus_*`` bound the rate of type 1 departures that free a
    superchannel; ``lambda_minus_*`` bound the rate of type 1 arrivals that
    go to an empty superchannel.
    """

    i_min: int
    i_max: int
    mu1_plus_lo: float
    mu1_plus_hi: float
    lambda_minus_lo: float
    lambda_minus_hi: float


def singleton_bounds(i, j, e, m2, n2):
    """Least and greatest number of type 1 flows alone in their superchannel.

    Works elementwise on arrays as well as on scalars.
    """
    s = m2 - j - e
    i_min = np.maximum(0, 2 * s - i)
    i_max = (n2 * s - i) // (n2 - 1)
    return i_min, i_max


def rate_bounds(r, scenario) -> RateBounds:
    """Bounds on the imprecise rates out of the reduced state `r`."""
    i, j, e = (int(v) for v in r)
    m2, n2 = scenario.m2, scenario.n2
    i_min, i_max = (int(v) for v in singleton_bounds(i, j, e, m2, n2))
    mu1, lam1 = float(scenario.mu1), float(scenario.lambda1)
    full = i == n2 * (m2 - j - e)
    if full:
        lam = (lam1, lam1)
    elif e == 0:
        lam = (0.0, 0.0)
    else:
        lam = (0.0, lam1)
    return RateBounds(i_min, i_max, i_min * mu1, i_max * mu1, *lam)


@lru_cache(maxsize=None)
def _fat_compositions(total, parts, n2):
    # compositions of `total` into `parts` parts, each part in [2, n2]
    if parts == 0:
        return 1 if total == 0 else 0
    if total < 2 * parts or total > n2 * parts:
        return 0
    return sum(_fat_compositions(total - v, parts - 1, n2) for v in range(2, n2 + 1))


@lru_cache(maxsize=None)
def expected_singletons(i, s, n2) -> Fraction:
    """Mean number of lone type 1 flows when all placements are equally likely.

    The `i` flows are spread over `s` distinguishable superchannels, each
    holding between 1 and `n2` flows; every such placement counts once.
    """
    if s == 0:
        if i:
            raise ValueError("flows without superchannels")
        return Fraction(0)
    num = den = 0
    for k in range(0, s + 1):
        ways = comb(s, k) * _fat_compositions(i - k, s - k, n2)
        num += k * ways
        den += ways
    if den == 0:
        raise ValueError(f"no placement of {i} flows into {s} superchannels (n2={n2})")
    return Fraction(num, den)


def _reduced_columns(space):
    S = space.states
    return S[:, 0], S[:, 1], S[:, 2]


def _ra_lambda_minus(space):
    sc = space.scenario
    i, j, e = _reduced_columns(space)
    R = sc.m1 - i - j * sc.n2
    lam1 = float(sc.lambda1)
    frac = np.divide(e * sc.n2, R, out=np.zeros(len(R)), where=R > 0)
    return lam1 * frac


def _lm_lambda_minus(space):
    sc = space.scenario
    i, j, e = _reduced_columns(space)
    full = i == sc.n2 * (sc.m2 - j - e)
    return np.where(full, float(sc.lambda1), 0.0)


def _lambda_minus(space, model):
    if model is ReducedModel.RA:
        return _ra_lambda_minus(space)
    if model is ReducedModel.LM:
        return _lm_lambda_minus(space)
    raise ValueError(f"no single lambda-minus for model {model.value}")


def _build_reduced(space, singletons, lambda_minus, tag) -> Generator:
    # `singletons` is the (possibly fractional) count behind mu1_plus
    sc = space.scenario
    n2, m1, m2 = sc.n2, sc.m1, sc.m2
    lam1, lam2 = float(sc.lambda1), float(sc.lambda2)
    mu1, mu2 = float(sc.mu1), float(sc.mu2)
    i, j, e = _reduced_columns(space)
    S = space.states
    idx = np.arange(len(S), dtype=np.int64)
    s = m2 - j - e
    R = m1 - i - j * n2
    singletons = np.asarray(singletons, dtype=float)
    lambda_minus = np.asarray(lambda_minus, dtype=float).copy()

    # folding where only one type 1 arrival target exists
    lambda_minus[i == n2 * s] = lam1
    lambda_minus[e == 0] = 0.0
    lambda_minus[R == 0] = 0.0
    if np.any((lambda_minus < 0) | (lambda_minus > lam1)):
        raise InvariantViolation(f"{tag}: lambda-minus outside [0, lambda1]")
    i_min, i_max = singleton_bounds(i, j, e, m2, n2)
    if np.any((singletons < i_min - 1e-12) | (singletons > i_max + 1e-12)):
        raise InvariantViolation(f"{tag}: lone-flow count outside [i_min, i_max]")

    parts = []
    m = e > 0
    parts.append((idx[m], S[m] + (0, 1, -1), lam2, ARRIVAL2))
    m = j > 0
    parts.append((idx[m], S[m] + (0, -1, 1), j[m] * mu2, DEPARTURE))
    m = R > 0
    parts.append((idx[m], S[m] + (1, 0, -1), lambda_minus[m], ARRIVAL1))
    eq = np.where(lambda_minus == lam1, 0.0, lam1 - lambda_minus)
    parts.append((idx[m], S[m] + (1, 0, 0), eq[m], ARRIVAL1))
    m = i > 0
    parts.append((idx[m], S[m] + (-1, 0, 1), singletons[m] * mu1, DEPARTURE))
    parts.append((idx[m], S[m] + (-1, 0, 0), (i[m] - singletons[m]) * mu1, DEPARTURE))

    diagonal = -(lam2 * (e > 0) + j * mu2 + lam1 * (R > 0) + i * mu1)
    gen = _assemble(space, parts, diagonal, tag)
    if np.max(np.diff(gen.matrix.indptr)) > MAX_REDUCED_ROW_NNZ:
        raise InvariantViolation(f"{tag}: a row has more than {MAX_REDUCED_ROW_NNZ} entries")
    return gen


def approx_singletons(space):
    """Estimated lone-flow count for every reduced state (float array)."""
    sc = space.scenario
    i, j, e = _reduced_columns(space)
    s = sc.m2 - j - e
    return np.array(
        [float(expected_singletons(int(a), int(b), sc.n2)) for a, b in zip(i, s)]
    )


def build_reduced_approx(scenario, model, space=None) -> Generator:
    """Approximate precise generator on the reduced space.

    `model` is ``"RA"`` or ``"LM"`` (the shared model of LF and MF).  The
    superchannel-freeing departure rate uses :func:`expected_singletons`.
    """
    model = ReducedModel(model)
    if model is ReducedModel.PI:
        raise ValueError("there is no approximate PI model")
    if space is None:
        space = enumerate_reduced(scenario)
    elif space.kind != REDUCED:
        raise ValueError("build_reduced_approx needs the reduced state space")
    return _build_reduced(
        space, approx_singletons(space), _lambda_minus(space, model), f"approx-{model.value}"
    )


def build_extremal_family(scenario, model, space=None) -> list:
    """Extremal generators whose row-wise minimum is the lower rate operator.

    RA and LM give two matrices (lone-flow count at its lower bound in every
    row, then at its upper bound).  PI gives four: every combination of
    those two counts with lambda-minus at 0 or at lambda1, wherever the
    latter is not forced.
    """
    model = ReducedModel(model)
    if space is None:
        space = enumerate_reduced(scenario)
    elif space.kind != REDUCED:
        raise ValueError("build_extremal_family needs the reduced state space")
    i, j, e = _reduced_columns(space)
    i_min, i_max = singleton_bounds(i, j, e, scenario.m2, scenario.n2)
    counts = (("min", i_min), ("max", i_max))
    if model is not ReducedModel.PI:
        lam = _lambda_minus(space, model)
        return [
            _build_reduced(space, c, lam, f"{model.value}-{name}") for name, c in counts
        ]
    lam1 = float(scenario.lambda1)
    family = []
    for name, c in counts:
        for lname, lam in (("lam0", 0.0), ("lam1", lam1)):
            lam_vec = np.full(len(space), lam)
            family.append(_build_reduced(space, c, lam_vec, f"PI-{name}-{lname}"))
    return family
