import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mldrl.microgrid import build_mld
from mldrl.mld import AugmentedState, MldDims, MldStep, MldSystem, check_constraints, step, validate


def identity_system(q: int = 1) -> MldSystem:
    dims = MldDims(n_c=1, n_d=0, m_c=1, m_d=0, r_c=0, r_d=0)
    return MldSystem(dims, A=[[1.0]], B1=[[0.0]], B2=np.zeros((1, 0)), B3=np.zeros((1, 0)), B5=[0.0],
                     E1=np.zeros((q, 1)), E2=np.zeros((q, 0)), E3=np.zeros((q, 0)), E4=np.zeros((q, 1)), E5=np.zeros(q))


def random_system(rng, n=2, m_c=2, m_d=1, r_c=2, r_d=2, q=5) -> MldSystem:
    dims = MldDims(n_c=n, n_d=0, m_c=m_c, m_d=m_d, r_c=r_c, r_d=r_d)
    m = m_c + m_d
    return MldSystem(dims, A=rng.normal(size=(n, n)), B1=rng.normal(size=(n, m)), B2=rng.normal(size=(n, r_d)),
                     B3=rng.normal(size=(n, r_c)), B5=rng.normal(size=n), E1=rng.normal(size=(q, m)),
                     E2=rng.normal(size=(q, r_d)), E3=rng.normal(size=(q, r_c)), E4=rng.normal(size=(q, n)),
                     E5=rng.normal(size=q))


def test_validate_accepts_consistent_system():
    assert validate(identity_system()).ok


def test_validate_names_wrong_b2_shape():
    s = identity_system()
    bad = MldSystem(s.dims, s.A, s.B1, np.zeros((2, 0)), s.B3, s.B5, s.E1, s.E2, s.E3, s.E4, s.E5)
    report = validate(bad)
    assert not report.ok
    assert "B2" in str(report) and "(1, 0)" in str(report) and "(2, 0)" in str(report)


def test_validate_flags_nan():
    s = identity_system()
    bad = MldSystem(s.dims, s.A, s.B1, s.B2, s.B3, s.B5, s.E1, s.E2, s.E3, s.E4, [np.nan])
    report = validate(bad)
    assert not report.ok and "E5" in str(report) and "non-finite" in str(report)


def test_dims_reject_negative_and_empty_state():
    with pytest.raises(ValueError):
        MldDims(-1, 1, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        MldDims(0, 0, 1, 0, 0, 0)


def test_system_is_read_only():
    s = identity_system()
    with pytest.raises(ValueError):
        s.A[0, 0] = 2.0


def test_identity_step_returns_state():
    s = identity_system()
    assert step(s, [3.7], MldStep([1.0], [], [])) == pytest.approx([3.7])


def test_microgrid_charging_and_discharging_steps(params):
    mld = build_mld(params)
    n_gen = params.N_gen
    u_charge = np.r_[50.0, 0.0, np.zeros(n_gen), np.zeros(n_gen)]
    nxt = step(mld, [100.0], MldStep(u_charge, np.r_[1.0, 1.0], np.r_[50.0, 0.0]))
    assert nxt[0] == pytest.approx(122.5, abs=1e-12)
    u_dis = np.r_[-50.0, 0.0, np.zeros(n_gen), np.zeros(n_gen)]
    nxt = step(mld, [100.0], MldStep(u_dis, np.r_[0.0, 1.0], np.r_[0.0, 0.0]))
    assert nxt[0] == pytest.approx(100.0 - 0.5 / 0.9 * 50.0, abs=1e-12)


def test_step_rejects_fractional_binaries_and_wrong_sizes():
    rng = np.random.default_rng(0)
    s = random_system(rng)
    with pytest.raises(ValueError, match="delta"):
        step(s, [0.0, 0.0], MldStep([0.0, 0.0, 0.0], [0.5, 1.0], [0.0, 0.0]))
    with pytest.raises(ValueError, match="u_d"):
        step(s, [0.0, 0.0], MldStep([0.0, 0.0, 0.3], [0.0, 1.0], [0.0, 0.0]))
    with pytest.raises(ValueError, match="x"):
        step(s, [0.0], MldStep([0.0, 0.0, 0.0], [0.0, 1.0], [0.0, 0.0]))


def test_zero_system_constraints_hold_with_zero_residual():
    ok, worst = check_constraints(identity_system(q=3), [0.0], MldStep([0.0], [], []))
    assert ok and worst == 0.0


def test_microgrid_product_violation_detected(params):
    mld = build_mld(params)
    n_gen = params.N_gen
    gamma_shift = np.zeros(mld.q)
    # charging 50 kW with z_b off by one from delta_b * P_b
    u = np.r_[50.0, 0.0, np.zeros(n_gen), np.zeros(n_gen)]
    ok, worst = check_constraints(mld, [100.0], MldStep(u, np.r_[1.0, 1.0], np.r_[49.0, 0.0]), rhs_shift=gamma_shift)
    assert not ok and worst >= 1.0 - 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_step_affine_superposition(seed):
    rng = np.random.default_rng(seed)
    s = random_system(rng, m_d=0, r_d=0)
    x1, x2 = rng.normal(size=2), rng.normal(size=2)
    s1 = MldStep(rng.normal(size=2), [], rng.normal(size=2))
    s2 = MldStep(rng.normal(size=2), [], rng.normal(size=2))
    s12 = MldStep(s1.u + s2.u, [], s1.z + s2.z)
    lhs = step(s, x1 + x2, s12)
    rhs = step(s, x1, s1) + step(s, x2, s2) - s.B5
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_json_round_trip(tmp_path, params):
    mld = build_mld(params)
    path = tmp_path / "mld.json"
    mld.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"dims", "A", "B1", "B2", "B3", "B5", "E1", "E2", "E3", "E4", "E5"}
    back = MldSystem.load(path)
    for name in ("A", "B1", "B2", "B3", "B5", "E1", "E2", "E3", "E4", "E5"):
        assert np.array_equal(getattr(back, name), getattr(mld, name))
    assert back.dims == mld.dims


def test_json_round_trip_with_empty_blocks(tmp_path):
    s = identity_system(q=2)
    path = tmp_path / "id.json"
    s.save(path)
    back = MldSystem.load(path)
    assert back.B2.shape == (1, 0) and back.E3.shape == (2, 0)
    assert validate(back).ok


def test_augmented_state_round_trip():
    chi = AugmentedState([1.0], [0.1, 0.2, 0.3], k=4)
    back = AugmentedState.from_dict(chi.to_dict())
    assert np.array_equal(back.x, chi.x) and np.array_equal(back.gamma, chi.gamma) and back.k == 4
