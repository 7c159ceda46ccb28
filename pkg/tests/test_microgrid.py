import json

import numpy as np
import pytest

from mldrl.microgrid import (MicrogridDecision, MicrogridParams, SubActionSpace, build_mld, build_mpc_problem,
                             exogenous_rhs, grid_cost, production_cost, stage_cost_coefficients, storage_update)
from mldrl.mld import MldStep, check_constraints, step, validate
from mldrl.mpc import build_milp
from mldrl.mld import AugmentedState
from mldrl.milp import solve_milp

from oracles import hand_assembled_horizon, piecewise_feasible, random_decision_tuple


def mld_classify(system, W, x_b, gamma_l, d):
    s = MldStep(d.u(), d.delta(), d.z())
    ok, _ = check_constraints(system, [x_b], s, tol=1e-6, rhs_shift=W @ gamma_l)
    return ok, float(step(system, [x_b], s)[0])


def test_mld_form_validates(params):
    assert validate(build_mld(params)).ok
    assert validate(build_mld(params, order_units=True)).ok


def test_encoding_matches_piecewise_model(params):
    system, W = build_mld(params), exogenous_rhs(params)
    rng = np.random.default_rng(3)
    seen = {True: 0, False: 0}
    for _ in range(300):
        x_b, g, d = random_decision_tuple(params, rng)
        lit_ok, lit_next = piecewise_feasible(params, x_b, g, d)
        mld_ok, mld_next = mld_classify(system, W, x_b, g, d)
        assert lit_ok == mld_ok, d
        seen[lit_ok] += 1
        if lit_ok:
            assert mld_next == pytest.approx(lit_next, abs=1e-9)
    assert seen[True] > 30 and seen[False] > 30


def test_storage_update_examples(params):
    assert storage_update(params, 100.0, 50.0) == pytest.approx(122.5)
    assert storage_update(params, 100.0, -50.0) == pytest.approx(100.0 - 0.5 / 0.9 * 50.0)


def test_cost_examples():
    assert grid_cost(0.2, 0.05, 100.0) == pytest.approx(20.0)
    assert grid_cost(0.2, 0.05, -100.0) == pytest.approx(-5.0)
    assert production_cost(0.15, [100.0, 0.0, 100.0]) == pytest.approx(30.0)


def test_stage_cost_coefficients_reproduce_piecewise_cost(params):
    g = np.array([0.2, 0.05, 0.15, 30.0, 200.0])
    coef = stage_cost_coefficients(g, params.N_gen)
    for P_grid in (70.0, -40.0):
        dg = int(P_grid >= 0)
        d = MicrogridDecision(1, dg, (1, 0, 0), 0.0, P_grid, (100.0, 0.0, 0.0), 0.0, dg * P_grid)
        vec = np.concatenate([[d.P_b, d.P_grid, *d.P_dis, d.z_b, d.z_grid], d.delta_dis, d.delta()])
        assert coef @ vec == pytest.approx(grid_cost(0.2, 0.05, P_grid) + production_cost(0.15, d.P_dis))


def test_sub_action_space_ordering():
    space = SubActionSpace(3)
    assert space.size == 32
    assert space.bits(0) == (0, 0, 0, 0, 0)
    assert space.bits(16) == (1, 0, 0, 0, 0)   # grid indicator is the most significant bit
    assert space.bits(8) == (0, 1, 0, 0, 0)
    for i in range(32):
        assert space.index(space.bits(i)) == i
        assert space.index_from_step(space.step_binaries(i)) == i
    # layout order is [delta_dis_1..3, delta_b, delta_grid]
    assert space.step_binaries(16).tolist() == [0, 0, 0, 0, 1]
    idx = np.array([3, 17, 30, 0])
    assert np.array_equal(space.from_eps_d(space.to_eps_d(idx)), idx)
    with pytest.raises(ValueError):
        space.bits(32)


def test_canonical_sorts_generator_bits():
    space = SubActionSpace(3)
    assert space.bits(space.canonical(space.index([1, 0, 0, 1, 0]))) == (1, 0, 1, 0, 0)
    assert space.bits(space.canonical(space.index([0, 1, 0, 1, 1]))) == (0, 1, 1, 1, 0)


def test_params_validation_and_unknown_keys():
    with pytest.raises(ValueError):
        MicrogridParams(x_b_min=300.0)
    with pytest.raises(ValueError, match="bogus"):
        MicrogridParams.from_dict({"bogus": 1})
    p = MicrogridParams.from_dict(json.loads(MicrogridParams().to_json()))
    assert p == MicrogridParams()


@pytest.mark.parametrize("order_units", [False, True])
def test_compiled_milp_matches_hand_assembled(params, order_units):
    rng = np.random.default_rng(11)
    problem = build_mpc_problem(params, 2, order_units=order_units)
    for _ in range(6):
        x_b = float(rng.uniform(params.x_b_min, params.x_b_max))
        rows = np.column_stack([rng.uniform(0.05, 0.3, 2), rng.uniform(0.0, 0.05, 2), rng.uniform(0.1, 0.3, 2),
                                rng.uniform(0, 250, 2), rng.uniform(0, 400, 2)])
        compiled = solve_milp(build_milp(problem, AugmentedState([x_b], rows.ravel())))
        hand = solve_milp(hand_assembled_horizon(params, x_b, rows, order_units))
        assert compiled.status == hand.status
        if compiled.optimal:
            assert compiled.objective == pytest.approx(hand.objective, abs=1e-6)
