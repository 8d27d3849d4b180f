"""Blocking events, irreducibility checks and bound-enclosure reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .exceptions import EnclosureViolation
from .generators import (
    Policy,
    ReducedModel,
    build_exact,
    build_extremal_family,
    build_reduced_approx,
)
from .operators import LowerOperator
from .solvers import (
    IterationParams,
    event_probability,
    limit_lower_probability,
    limit_upper_probability,
    stationary_by_linear_solve,
)
from .statespace import DETAILED, REDUCED, enumerate_detailed, enumerate_reduced

ENCLOSURE_FLOOR = 1e-9


class EventKind(str, Enum):
    TYPE1 = "BP1"
    TYPE2 = "BP2"


@dataclass(frozen=True)
class BlockingEvent:
    """The set of states in which requests of one type are blocked.

    Type 1 requests are blocked when no channel is free; type 2 requests
    when no superchannel is empty.
    """

    kind: EventKind
    space_kind: str
    scenario: object

    def __call__(self, state) -> bool:
        sc = self.scenario
        if self.space_kind == DETAILED:
            if self.kind is EventKind.TYPE1:
                return sum(ik * (sc.n2 - k) for k, ik in enumerate(state[: sc.n2])) == 0
            return state[0] == 0
        i, j, e = state
        if self.kind is EventKind.TYPE1:
            return sc.m1 - i - j * sc.n2 == 0
        return e == 0

    def mask(self, space):
        """Boolean indicator of the event over `space`."""
        if space.kind != self.space_kind:
            raise ValueError(f"event is defined on the {self.space_kind} space")
        S = space.states
        sc = self.scenario
        if self.space_kind == DETAILED:
            if self.kind is EventKind.TYPE1:
                return S[:, : sc.n2] @ (sc.n2 - np.arange(sc.n2)) == 0
            return S[:, 0] == 0
        if self.kind is EventKind.TYPE1:
            return sc.m1 - S[:, 0] - S[:, 1] * sc.n2 == 0
        return S[:, 2] == 0


def blocking_event(kind, space_kind, scenario) -> BlockingEvent:
    if space_kind not in (DETAILED, REDUCED):
        raise ValueError(f"unknown space kind {space_kind!r}")
    return BlockingEvent(EventKind(kind), space_kind, scenario)


@dataclass(frozen=True)
class ErgodicityReport:
    """Result of a reachability check.

    Attributes
    ----------
    irreducible : bool
        Every state can reach every other state.
    top_class : ndarray of int
        States reachable from every state.
    witness : tuple of (int, int) or None
        A pair ``(x, y)`` of state indices such that ``y`` cannot be reached
        from ``x``.
    """

    irreducible: bool
    top_class: np.ndarray = field(repr=False)
    witness: tuple | None = None

    @property
    def verdict(self) -> str:
        # a proper top class does not settle ergodicity of a lower operator
        return "ergodic" if self.irreducible else "undetermined"


def _reachability_report(adjacency) -> ErgodicityReport:
    A = sp.csr_matrix(adjacency)
    n = A.shape[0]
    A = A - sp.diags(A.diagonal())
    A.eliminate_zeros()
    A.data = (A.data > 0).astype(np.int8)
    A.eliminate_zeros()
    ncomp, labels = connected_components(A, directed=True, connection="strong")
    if ncomp == 1:
        return ErgodicityReport(True, np.arange(n), None)
    # condensation: a component is a sink if no edge leaves it
    coo = A.tocoo()
    leaving = labels[coo.row] != labels[coo.col]
    has_exit = np.zeros(ncomp, dtype=bool)
    has_exit[labels[coo.row[leaving]]] = True
    sinks = np.flatnonzero(~has_exit)
    first_sink = np.flatnonzero(labels == sinks[0])
    if len(sinks) == 1:
        top = first_sink
        outside = np.flatnonzero(labels != sinks[0])
        witness = (int(top[0]), int(outside[0]))
    else:
        top = np.array([], dtype=np.int64)
        other = np.flatnonzero(labels == sinks[1])
        witness = (int(first_sink[0]), int(other[0]))
    return ErgodicityReport(False, top, witness)


def check_irreducible(gen) -> ErgodicityReport:
    """Strong connectivity of the graph of positive off-diagonal rates."""
    matrix = gen.matrix if hasattr(gen, "matrix") else gen
    return _reachability_report(matrix)


def check_lower_operator_ergodic(op) -> ErgodicityReport:
    """Irreducibility of the upper-reachability graph of a lower operator.

    There is an edge ``x -> y`` when ``[Q_upper 1_y](x) > 0``, which for an
    extremal family is the largest ``(x, y)`` rate over its members.
    """
    if not isinstance(op, LowerOperator):
        op = LowerOperator([op])
    return _reachability_report(op.upper_rates())


# --------------------------------------------------------------------------
# enclosure


@dataclass
class EnclosureRow:
    policy: str
    event: str
    exact: float
    approximate: float
    policy_lower: float
    policy_upper: float
    pi_lower: float
    pi_upper: float
    converged: bool = True
    results: dict = field(default_factory=dict, repr=False)

    def chain(self):
        return {
            "pi_lower": self.pi_lower,
            "policy_lower": self.policy_lower,
            "exact": self.exact,
            "approximate": self.approximate,
            "policy_upper": self.policy_upper,
            "pi_upper": self.pi_upper,
        }


def ordered(a, b, phi) -> bool:
    """``a <= b`` up to the enclosure slack ``2 * phi * max(|a|, |b|) + 1e-9``."""
    return a <= b + 2 * phi * max(abs(a), abs(b)) + ENCLOSURE_FLOOR


def check_enclosure(row: EnclosureRow, phi):
    """Raise :class:`EnclosureViolation` if `row` breaks the bound chain."""
    pairs = [
        ("pi_lower", "policy_lower"),
        ("policy_lower", "exact"),
        ("exact", "policy_upper"),
        ("policy_upper", "pi_upper"),
        ("policy_lower", "approximate"),
        ("approximate", "policy_upper"),
    ]
    values = row.chain()
    for lo, hi in pairs:
        if not ordered(values[lo], values[hi], phi):
            raise EnclosureViolation(
                f"{row.policy}/{row.event}: {lo}={values[lo]!r} > {hi}={values[hi]!r}",
                values,
            )


def _policy_model(policy):
    return ReducedModel.RA if policy is Policy.RA else ReducedModel.LM


def enclosure_report(scenario, event_kinds=("BP1", "BP2"), params=None,
                     policies=("RA", "LF", "MF"), check=True, state_cap=None) -> list:
    """Exact, approximate and bounding blocking probabilities side by side.

    For every policy and event: the exact value (linear solve on the
    detailed space), the approximate value (linear solve of the reduced
    approximation), the policy-dependent bounds and the policy-independent
    bounds.  With ``check=True`` the chain
    ``PI-lower <= policy-lower <= exact <= policy-upper <= PI-upper`` and
    ``policy-lower <= approximate <= policy-upper`` is asserted with slack
    ``2 * phi * value + 1e-9``.

    Returns
    -------
    list of EnclosureRow
    """
    params = params or IterationParams()
    det = enumerate_detailed(scenario, max_states=state_cap)
    red = enumerate_reduced(scenario)
    kinds = [EventKind(k) for k in event_kinds]
    det_masks = {k: blocking_event(k, DETAILED, scenario).mask(det) for k in kinds}
    red_masks = {k: blocking_event(k, REDUCED, scenario).mask(red) for k in kinds}

    cache = {}

    def reduced_side(model):
        if model not in cache:
            approx_pi = stationary_by_linear_solve(build_reduced_approx(scenario, model, red))
            op = LowerOperator(build_extremal_family(scenario, model, red))
            cache[model] = (approx_pi, op)
        return cache[model]

    pi_op = LowerOperator(build_extremal_family(scenario, ReducedModel.PI, red))
    pi_bounds = {
        k: (limit_lower_probability(pi_op, red_masks[k], params),
            limit_upper_probability(pi_op, red_masks[k], params))
        for k in kinds
    }
    policy_bounds = {}
    rows = []
    for name in policies:
        policy = Policy(name)
        model = _policy_model(policy)
        exact_pi = stationary_by_linear_solve(build_exact(scenario, policy, det))
        approx_pi, op = reduced_side(model)
        for k in kinds:
            if (model, k) not in policy_bounds:
                policy_bounds[model, k] = (
                    limit_lower_probability(op, red_masks[k], params),
                    limit_upper_probability(op, red_masks[k], params),
                )
            lo, hi = policy_bounds[model, k]
            plo, phi_ = pi_bounds[k]
            row = EnclosureRow(
                policy=policy.value,
                event=k.value,
                exact=event_probability(exact_pi, det_masks[k]),
                approximate=event_probability(approx_pi, red_masks[k]),
                policy_lower=lo.value,
                policy_upper=hi.value,
                pi_lower=plo.value,
                pi_upper=phi_.value,
                converged=all(r.converged for r in (lo, hi, plo, phi_)),
                results={"policy_lower": lo, "policy_upper": hi,
                         "pi_lower": plo, "pi_upper": phi_},
            )
            if check:
                check_enclosure(row, params.phi)
            rows.append(row)
    return rows
