import json

import numpy as np
import pytest

from mldrl.agent import MicrogridEnv
from mldrl.bench import (EvalRecord, FixedBinaryPolicy, MetricsSummary, PolicyOutcome, evaluate, solve_optimal,
                         summarize, write_records, write_summaries)
from mldrl.lp import LpStatus
from mldrl.mpc import build_milp


@pytest.fixture
def env(params, short_profiles):
    return MicrogridEnv(params, 2, short_profiles)


def oracle_choice(env):
    def choose(chi):
        sol = solve_optimal(env, chi)
        m_bins = list(range(env.problem.layout.n_cont, env.problem.layout.n_eps))
        return np.round(sol.primal[m_bins])
    return choose


def test_oracle_policy_has_zero_gap(env):
    methods = {"oracle": FixedBinaryPolicy(env, oracle_choice(env))}
    records, sums = evaluate(env, methods, 8, seed=1)
    by = {s.method: s for s in sums}
    assert [s.method for s in sums] == ["Optimal", "oracle"]
    assert by["oracle"].optimality_gap_pct == pytest.approx(0.0, abs=1e-6)
    assert by["oracle"].infeasibility_rate_per_1000 == 0.0
    assert by["Optimal"].optimality_gap_pct == 0.0
    assert len(records) == 16


def test_always_infeasible_policy(env):
    methods = {"bad": lambda chi: PolicyOutcome(LpStatus.INFEASIBLE, None, 1e-3)}
    _, sums = evaluate(env, methods, 5, seed=2)
    bad = sums[1]
    assert bad.infeasibility_rate_per_1000 == 1000.0
    assert bad.optimality_gap_pct is None and bad.gap_instances == 0


def test_gap_uses_absolute_optimum_and_floor():
    recs = [
        EvalRecord(0, "Optimal", "Optimal", -10.0, 0.02, 4), EvalRecord(0, "m", "Optimal", -9.0, 0.01, 4),
        EvalRecord(1, "Optimal", "Optimal", 20.0, 0.04, 4), EvalRecord(1, "m", "Optimal", 23.0, 0.005, 4),
        EvalRecord(2, "Optimal", "Optimal", 0.0, 0.01, 4), EvalRecord(2, "m", "Optimal", 1.0, 0.01, 4),
        EvalRecord(3, "Optimal", "Optimal", 5.0, 0.01, 4), EvalRecord(3, "m", "Infeasible", None, 0.01, 4),
    ]
    s = summarize(recs, "m", 4)
    assert s.optimality_gap_pct == pytest.approx((10.0 + 15.0) / 2)
    assert s.gap_instances == 2 and s.gap_excluded == 1
    assert s.infeasibility_rate_per_1000 == 250.0
    assert s.reduction_factor_max == pytest.approx(40.0 / 10.0)


def test_record_requires_objective_iff_optimal():
    with pytest.raises(ValueError):
        EvalRecord(0, "m", "Optimal", None, 0.0, 4)
    with pytest.raises(ValueError):
        EvalRecord(0, "m", "Infeasible", 1.0, 0.0, 4)


def test_outputs_split_deterministic_and_timing_fields(env, tmp_path):
    records, sums = evaluate(env, {"oracle": FixedBinaryPolicy(env, oracle_choice(env))}, 3, seed=0)
    write_records(records, tmp_path / "records.csv")
    write_summaries(sums, tmp_path, {"seed": 0})
    summary = json.loads((tmp_path / "summary.json").read_text())
    timing = json.loads((tmp_path / "timing.json").read_text())
    assert summary["seed"] == 0
    assert set(summary["methods"]["oracle"]) | set(MetricsSummary.TIMING_FIELDS) == set(MetricsSummary.__dataclass_fields__)
    assert set(timing["methods"]["oracle"]) == {"method", "N_p", *MetricsSummary.TIMING_FIELDS}
    lines = (tmp_path / "records.csv").read_text().splitlines()
    assert lines[0] == "chi_id,method,status,J,wall_time,N_p" and len(lines) == 7
