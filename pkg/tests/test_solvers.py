import logging
import math

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import chain, two_state
from flexigrid.analysis import blocking_event
from flexigrid.exceptions import NonFiniteValue, SingularSystem, StepTooLarge
from flexigrid.generators import build_exact, build_extremal_family, build_reduced_approx
from flexigrid.operators import LowerOperator
from flexigrid.scenario import from_load
from flexigrid.solvers import (
    IterationParams,
    SimulationParams,
    event_probability,
    gillespie_blocking_estimate,
    guaranteed_error_bound,
    limit_lower_probability,
    limit_upper_probability,
    midpoint,
    stationary_by_linear_solve,
    step_halving_check,
    variation,
)
from flexigrid.statespace import DETAILED, REDUCED


def erlang_b(c, a):
    terms = [a**k / math.factorial(k) for k in range(c + 1)]
    return terms[-1] / sum(terms)


def mmcc(c, lam, mu):
    Q = np.zeros((c + 1, c + 1))
    for k in range(c):
        Q[k, k + 1] = lam
        Q[k + 1, k] = (k + 1) * mu
    return chain(Q, tag=f"M/M/{c}/{c}")


def test_variation_and_midpoint():
    f = np.array([1.0, -3.0, 2.0])
    assert variation(f) == 2.5
    assert midpoint(f) == -0.5


@pytest.mark.parametrize("a, b", [(1, 1), (3, 7), (0.1, 9.9)])
def test_two_state_limit(a, b):
    params = IterationParams(phi=1e-4)
    g = two_state(a, b)
    event = np.array([False, True])
    lo = limit_lower_probability(g, event, params)
    hi = limit_upper_probability(g, event, params)
    assert lo.converged and hi.converged
    assert lo.value == pytest.approx(a / (a + b), rel=1e-4)
    assert hi.value == pytest.approx(a / (a + b), rel=1e-4)
    assert abs(lo.value - a / (a + b)) <= lo.guaranteed_abs_error


@pytest.mark.parametrize("c, a", [(1, 0.5), (5, 3.0), (10, 12.0)])
def test_erlang_b(c, a):
    g = mmcc(c, a, 1.0)
    full = np.zeros(c + 1, dtype=bool)
    full[-1] = True
    pi = stationary_by_linear_solve(g)
    assert event_probability(pi, full) == pytest.approx(erlang_b(c, a), rel=1e-12)
    res = limit_lower_probability(g, full, IterationParams(phi=1e-6))
    assert res.value == pytest.approx(erlang_b(c, a), rel=2e-6)


def test_linear_solve_matches_dense_null_space():
    rng = np.random.default_rng(3)
    Q = rng.uniform(0, 2, size=(6, 6))
    g = chain(Q)
    pi = stationary_by_linear_solve(g)
    A = np.vstack([g.toarray().T, np.ones(6)])
    ref, *_ = np.linalg.lstsq(A, np.r_[np.zeros(6), 1.0], rcond=None)
    np.testing.assert_allclose(pi, ref, atol=1e-12)


def test_linear_solve_rejects_reducible():
    g = chain([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]])
    with pytest.raises(SingularSystem):
        stationary_by_linear_solve(g)


def test_iteration_and_linear_agree_on_link():
    sc = from_load(8, 4, 2.0)
    gen = build_exact(sc, "MF")
    pi = stationary_by_linear_solve(gen)
    for ev in ("BP1", "BP2"):
        mask = blocking_event(ev, DETAILED, sc).mask(gen.space)
        res = limit_lower_probability(gen, mask, IterationParams(phi=1e-7))
        assert res.value == pytest.approx(event_probability(pi, mask), rel=2e-7)


def test_lower_below_upper_imprecise():
    sc = from_load(12, 4, 1.0)
    op = LowerOperator(build_extremal_family(sc, "PI"))
    mask = blocking_event("BP2", REDUCED, sc).mask(op.space)
    lo = limit_lower_probability(op, mask)
    hi = limit_upper_probability(op, mask)
    assert lo.converged and hi.converged
    assert lo.value < hi.value
    assert lo.delta == pytest.approx(1 / (2 * op.norm))


def test_default_steps():
    g = two_state(3, 7)
    assert IterationParams().step_for(LowerOperator([g])) == pytest.approx(0.9 * 2 / 14)
    with pytest.raises(StepTooLarge):
        IterationParams(delta=2 / 14).step_for(LowerOperator([g]))
    with pytest.raises(StepTooLarge):
        IterationParams(delta=0.0)
    with pytest.raises(ValueError):
        IterationParams(phi=0.0)
    with pytest.raises(ValueError):
        IterationParams(max_iters=0)


def test_iteration_cap_reported(caplog):
    sc = from_load(8, 4, 1.0)
    gen = build_reduced_approx(sc, "RA")
    mask = blocking_event("BP1", REDUCED, sc).mask(gen.space)
    with caplog.at_level(logging.WARNING):
        res = limit_lower_probability(gen, mask, IterationParams(max_iters=3))
    assert not res.converged
    assert res.iterations == 3
    assert "no convergence" in caplog.text


def test_blow_up_detected(monkeypatch):
    op = LowerOperator([two_state(1, 1)])
    monkeypatch.setattr(op, "apply_lower", lambda f: np.full_like(f, np.nan))
    with pytest.raises(NonFiniteValue):
        limit_lower_probability(op, np.array([True, False]))
    monkeypatch.setattr(op, "apply_lower", lambda f: np.full_like(f, 100.0))
    with pytest.raises(NonFiniteValue):
        limit_lower_probability(op, np.array([True, False]))


def test_mask_shape_checked():
    with pytest.raises(ValueError):
        limit_lower_probability(two_state(1, 1), np.array([True, False, True]))


def test_guaranteed_error_bound_formula():
    assert guaranteed_error_bound([0.5, 0.25, 0.1], 0.1, 4.0) == pytest.approx(
        max(2 * 0.01 * 16 * 0.75, 0.1)
    )
    assert guaranteed_error_bound([0.3], 1.0, 1.0) == 0.3
    with pytest.raises(ValueError):
        guaranteed_error_bound([], 0.1, 1.0)


def test_step_halving_passes_on_two_state():
    out = step_halving_check(two_state(3, 7), np.array([False, True]))
    assert out.passed and out.converged
    bad = step_halving_check(two_state(3, 7), np.array([False, True]),
                             IterationParams(delta=0.2))
    assert not bad.passed and math.isnan(bad.value_delta)


@pytest.fixture(scope="module")
def small_link():
    sc = from_load(4, 2, 1.0)
    gen = build_exact(sc, "RA")
    masks = {ev: blocking_event(ev, DETAILED, sc).mask(gen.space) for ev in ("BP1", "BP2")}
    return sc, gen, masks


def test_simulation_close_to_linear(small_link):
    sc, gen, masks = small_link
    pi = stationary_by_linear_solve(gen)
    est = gillespie_blocking_estimate(
        gen, sc, masks, SimulationParams(batch_arrivals=20_000, min_batches=10, max_batches=10)
    )
    for ev, mask in masks.items():
        exact = event_probability(pi, mask)
        assert est[ev].batches == 10
        assert abs(est[ev].mean - exact) < 5 * est[ev].ci_halfwidth + 1e-3


def test_simulation_is_seed_deterministic(small_link):
    sc, gen, masks = small_link
    p = SimulationParams(batch_arrivals=5_000, seed=7)
    a = gillespie_blocking_estimate(gen, sc, masks, p)
    b = gillespie_blocking_estimate(gen, sc, masks, p)
    c = gillespie_blocking_estimate(gen, sc, masks, SimulationParams(batch_arrivals=5_000, seed=8))
    assert a == b
    assert a["BP2"].batch_means != c["BP2"].batch_means


def test_simulation_never_seen_event(small_link):
    sc, gen, _ = small_link
    never = np.zeros(gen.n, dtype=bool)
    est = gillespie_blocking_estimate(gen, sc, {"none": never},
                                      SimulationParams(batch_arrivals=1000, max_batches=6))
    assert est["none"].zero_mean
    assert est["none"].relative_error == math.inf
    assert est["none"].batches == 6


def test_simulation_needs_kinds(small_link):
    sc, _, masks = small_link
    g = two_state(1, 1)
    with pytest.raises(ValueError):
        gillespie_blocking_estimate(g, sc, {"x": np.array([True, False])})


@pytest.mark.parametrize(
    "kw",
    [dict(batch_arrivals=0), dict(min_batches=1), dict(min_batches=5, max_batches=4),
     dict(phi=0), dict(confidence=1.0)],
)
def test_simulation_params_checked(kw):
    with pytest.raises(ValueError):
        SimulationParams(**kw)


def test_linear_solve_accepts_raw_matrix():
    Q = sp.csr_matrix(np.array([[-2.0, 2.0], [1.0, -1.0]]))
    np.testing.assert_allclose(stationary_by_linear_solve(Q), [1 / 3, 2 / 3])


def test_trivial_events():
    g = two_state(3, 7)
    full = limit_lower_probability(g, np.array([True, True]))
    assert (full.value, full.iterations, full.converged) == (1.0, 0, True)
    empty = limit_upper_probability(g, np.array([False, False]))
    assert (empty.value, empty.iterations) == (0.0, 0)
    assert step_halving_check(g, np.array([True, True])).passed


def test_error_bound_examples():
    assert guaranteed_error_bound([0.0], 0.3, 5.0) == 0.0
    assert guaranteed_error_bound([0.5, 0.25], 0.1, 1.0) == 0.25


def test_symmetric_generator_gives_uniform():
    Q = np.array([[0, 1, 2, 0], [1, 0, 1, 3], [2, 1, 0, 1], [0, 3, 1, 0]], dtype=float)
    np.testing.assert_allclose(stationary_by_linear_solve(chain(Q)), 0.25, atol=1e-14)


def test_exact_model_linear_vs_iteration():
    sc = from_load(8, 2, 1.0)
    gen = build_exact(sc, "RA")
    pi = stationary_by_linear_solve(gen)
    for ev in ("BP1", "BP2"):
        mask = blocking_event(ev, DETAILED, sc).mask(gen.space)
        lin = event_probability(pi, mask)
        assert limit_lower_probability(gen, mask).value == pytest.approx(lin, rel=1e-3)


def test_type2_only_limit_is_erlang_b():
    # type 1 traffic negligible: superchannels behave like an Erlang loss system
    from flexigrid.scenario import Scenario

    sc = Scenario(8, 2, 1e-5, 4.0, 1.0, 1.0)
    gen = build_exact(sc, "RA")
    mask = blocking_event("BP2", DETAILED, sc).mask(gen.space)
    target = erlang_b(sc.m2, 4.0)
    assert event_probability(stationary_by_linear_solve(gen), mask) == pytest.approx(
        target, rel=1e-3)
    est = gillespie_blocking_estimate(
        gen, sc, {"BP2": mask}, SimulationParams(batch_arrivals=50_000, min_batches=10, seed=3))
    assert abs(est["BP2"].mean - target) < 4 * est["BP2"].ci_halfwidth
