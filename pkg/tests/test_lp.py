import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mldrl.lp import LinearProgram, LpStatus, solve_lp

from oracles import random_bounded_lp, vertex_enumeration


def test_simple_optimum_at_lower_bound():
    sol = solve_lp(LinearProgram([1.0], [[-1.0], [1.0]], [0.0, 5.0]))
    assert sol.status is LpStatus.OPTIMAL
    assert sol.primal == pytest.approx([0.0], abs=1e-12)
    assert sol.objective == pytest.approx(0.0, abs=1e-12)


def test_unbounded():
    assert solve_lp(LinearProgram([-1.0], [[-1.0]], [0.0])).status is LpStatus.UNBOUNDED


def test_infeasible():
    assert solve_lp(LinearProgram([1.0], [[1.0], [-1.0]], [-1.0, 0.0])).status is LpStatus.INFEASIBLE


def test_no_rows_zero_cost_is_optimal_and_nonzero_cost_unbounded():
    assert solve_lp(LinearProgram([0.0, 0.0], np.zeros((0, 2)), [])).status is LpStatus.OPTIMAL
    assert solve_lp(LinearProgram([1.0, 0.0], np.zeros((0, 2)), [])).status is LpStatus.UNBOUNDED


def test_offset_enters_objective():
    sol = solve_lp(LinearProgram([1.0], [[-1.0]], [-2.0], offset=3.0))
    assert sol.objective == pytest.approx(5.0)


def test_bounds_are_folded():
    sol = solve_lp(LinearProgram([1.0, -1.0], np.zeros((0, 2)), [], lo=[-2.0, -np.inf], hi=[np.inf, 3.0]))
    assert sol.status is LpStatus.OPTIMAL
    assert sol.primal == pytest.approx([-2.0, 3.0])


def test_rejects_bad_shapes_and_nonfinite():
    with pytest.raises(ValueError):
        LinearProgram([1.0, 2.0], [[1.0]], [1.0])
    with pytest.raises(ValueError):
        LinearProgram([1.0], [[1.0]], [1.0, 2.0])
    with pytest.raises(ValueError):
        LinearProgram([np.inf], [[1.0]], [1.0])


def test_matches_vertex_enumeration_on_random_lps():
    rng = np.random.default_rng(2024)
    for _ in range(60):
        lp = random_bounded_lp(rng)
        sol = solve_lp(lp)
        ref = vertex_enumeration(lp)
        if ref is None:
            assert sol.status is LpStatus.INFEASIBLE
        else:
            assert sol.status is LpStatus.OPTIMAL
            assert sol.objective == pytest.approx(ref, abs=1e-6)


def test_optimal_solution_invariants():
    rng = np.random.default_rng(7)
    for _ in range(40):
        lp = random_bounded_lp(rng)
        sol = solve_lp(lp)
        if sol.optimal:
            assert lp.max_violation(sol.primal) <= 1e-6
            assert sol.objective == pytest.approx(float(lp.c @ sol.primal), abs=1e-9 * (1 + abs(sol.objective)))


def test_no_sampled_feasible_point_beats_optimum():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(30):
        lp = random_bounded_lp(rng, max_vars=3, max_rows=4)
        sol = solve_lp(lp)
        if not sol.optimal:
            continue
        pts = rng.uniform(-5.0, 5.0, size=(4000, lp.n_vars))
        feas = np.all(pts @ lp.G.T <= lp.h, axis=1)
        if np.any(feas):
            checked += 1
            assert np.min(pts[feas] @ lp.c) >= sol.objective - 1e-7
    assert checked > 5


def test_deterministic():
    rng = np.random.default_rng(3)
    lp = random_bounded_lp(rng)
    a, b = solve_lp(lp), solve_lp(lp)
    assert a.status is b.status
    if a.optimal:
        assert np.array_equal(a.primal, b.primal) and a.objective == b.objective


def test_warm_start_after_bound_change_matches_cold():
    rng = np.random.default_rng(5)
    for _ in range(30):
        lp = random_bounded_lp(rng)
        first = solve_lp(lp)
        if not first.optimal:
            continue
        tighter = LinearProgram(lp.c, lp.G, lp.h, lo=lp.lo, hi=np.minimum(lp.hi, first.primal + 0.5))
        warm, cold = solve_lp(tighter, first.basis), solve_lp(tighter)
        assert warm.status is cold.status
        if cold.optimal:
            assert warm.objective == pytest.approx(cold.objective, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_infeasibility_agrees_with_oracle(seed):
    rng = np.random.default_rng(seed)
    lp = random_bounded_lp(rng, max_vars=3, max_rows=8)
    sol = solve_lp(lp)
    ref = vertex_enumeration(lp)
    assert (ref is None) == (sol.status is LpStatus.INFEASIBLE)
    if ref is not None:
        assert sol.objective == pytest.approx(ref, abs=1e-6)
