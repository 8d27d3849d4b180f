import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import chain, reachable
from flexigrid.analysis import (
    BlockingEvent,
    EnclosureRow,
    EventKind,
    blocking_event,
    check_enclosure,
    check_irreducible,
    check_lower_operator_ergodic,
    enclosure_report,
)
from flexigrid.exceptions import EnclosureViolation
from flexigrid.generators import build_exact, build_extremal_family, build_reduced_approx
from flexigrid.operators import LowerOperator
from flexigrid.scenario import from_load
from flexigrid.solvers import IterationParams
from flexigrid.statespace import DETAILED, REDUCED, enumerate_detailed, enumerate_reduced


def test_events_call_and_mask_agree():
    sc = from_load(12, 4, 1.0)
    for kind, space in ((DETAILED, enumerate_detailed(sc)), (REDUCED, enumerate_reduced(sc))):
        for ev in ("BP1", "BP2"):
            event = blocking_event(ev, kind, sc)
            assert list(event.mask(space)) == [event(tuple(s)) for s in space]


def test_event_definitions():
    sc = from_load(8, 4, 1.0)
    bp1 = blocking_event(EventKind.TYPE1, DETAILED, sc)
    assert bp1((0, 0, 0, 0, 2)) and bp1((0, 0, 0, 0, 0))
    assert not bp1((0, 0, 0, 1, 1))
    bp2 = blocking_event("BP2", REDUCED, sc)
    assert bp2((4, 0, 0)) and not bp2((0, 0, 2))


def test_event_space_mismatch():
    sc = from_load(8, 4, 1.0)
    with pytest.raises(ValueError):
        blocking_event("BP1", DETAILED, sc).mask(enumerate_reduced(sc))
    with pytest.raises(ValueError):
        blocking_event("BP1", "other", sc)
    with pytest.raises(ValueError):
        blocking_event("BP3", DETAILED, sc)


def planted_two_blocks():
    # {0, 1} and {2, 3} are closed classes
    return chain([[0, 1, 0, 0], [2, 0, 0, 0], [0, 0, 0, 3], [0, 0, 1, 0]])


def test_planted_counterexample():
    rep = check_irreducible(planted_two_blocks())
    assert not rep.irreducible
    assert rep.verdict == "undetermined"
    assert len(rep.top_class) == 0
    x, y = rep.witness
    assert not reachable(planted_two_blocks().toarray())[x, y]


def test_transient_state_gives_top_class():
    g = chain([[0, 1, 0], [0, 0, 1], [0, 1, 0]])
    rep = check_irreducible(g)
    assert not rep.irreducible
    assert sorted(rep.top_class) == [1, 2]
    x, y = rep.witness
    assert not reachable(g.toarray())[x, y]


@pytest.mark.parametrize("m1, n2", [(8, 2), (8, 4), (12, 3)])
def test_link_models_irreducible(m1, n2):
    sc = from_load(m1, n2, 1.0)
    for p in ("RA", "LF", "MF"):
        assert check_irreducible(build_exact(sc, p)).verdict == "ergodic"
    for m in ("RA", "LM"):
        assert check_irreducible(build_reduced_approx(sc, m)).irreducible
    for m in ("RA", "LM", "PI"):
        rep = check_lower_operator_ergodic(LowerOperator(build_extremal_family(sc, m)))
        assert rep.irreducible


def test_lower_operator_uses_union_of_edges():
    a = chain([[0, 1], [0, 0]])
    b = chain([[0, 0], [1, 0]])
    assert not check_irreducible(a).irreducible
    assert check_lower_operator_ergodic(LowerOperator([a, b])).irreducible
    assert not check_lower_operator_ergodic(a).irreducible


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 7).flatmap(
    lambda n: st.lists(st.lists(st.booleans(), min_size=n, max_size=n), min_size=n, max_size=n)))
def test_reachability_against_closure(adj):
    A = np.array(adj, dtype=float)
    np.fill_diagonal(A, 0)
    rep = check_irreducible(sp.csr_matrix(A))
    R = reachable(A)
    assert rep.irreducible == bool(R.all())
    top = set(np.flatnonzero(R.all(axis=0)))
    assert set(rep.top_class.tolist()) == top
    if rep.irreducible:
        assert rep.witness is None
    else:
        x, y = rep.witness
        assert not R[x, y]


def test_enclosure_report_small():
    sc = from_load(8, 4, 2.0)
    rows = enclosure_report(sc)
    assert len(rows) == 6
    assert {(r.policy, r.event) for r in rows} == {
        (p, e) for p in ("RA", "LF", "MF") for e in ("BP1", "BP2")
    }
    for r in rows:
        assert r.converged
        assert r.pi_lower <= r.pi_upper


def test_enclosure_detects_violation():
    row = EnclosureRow("RA", "BP1", exact=0.5, approximate=0.3, policy_lower=0.2,
                       policy_upper=0.4, pi_lower=0.1, pi_upper=0.6)
    with pytest.raises(EnclosureViolation) as info:
        check_enclosure(row, 1e-3)
    assert info.value.values["exact"] == 0.5
    ok = EnclosureRow("RA", "BP1", exact=0.3, approximate=0.3, policy_lower=0.2,
                      policy_upper=0.4, pi_lower=0.1, pi_upper=0.6)
    check_enclosure(ok, 1e-3)


def test_enclosure_report_with_custom_params():
    sc = from_load(8, 2, 1.0)
    rows = enclosure_report(sc, event_kinds=("BP2",), policies=("LF",),
                            params=IterationParams(phi=1e-5))
    (r,) = rows
    assert r.policy_lower == pytest.approx(r.exact, rel=2e-5)
    assert isinstance(BlockingEvent(EventKind.TYPE2, REDUCED, sc)((0, 0, 0)), bool)


def test_event_examples():
    sc = from_load(4, 2, 1.0)
    for ev in ("BP1", "BP2"):
        assert blocking_event(ev, DETAILED, sc)((0, 0, 2))
    big = from_load(16, 4, 1.0)
    for ev in ("BP1", "BP2"):
        assert blocking_event(ev, REDUCED, big)((0, 4, 0))
        assert not blocking_event(ev, REDUCED, big)((1, 0, 3))


def test_singleton_families():
    assert check_lower_operator_ergodic(LowerOperator([chain([[0, 1], [1, 0]])])).irreducible
    rep = check_lower_operator_ergodic(LowerOperator([planted_two_blocks()]))
    assert not rep.irreducible and rep.witness is not None
