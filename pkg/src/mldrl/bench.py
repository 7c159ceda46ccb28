"""Evaluation of learned discrete policies against exact branch-and-bound."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .agent import FeatureScaler, MicrogridEnv, infer
from .lp import LpStatus
from .microgrid import build_mpc_problem
from .milp import BnbConfig, MilpStatus, solve_milp
from .mld import AugmentedState
from .mpc import build_milp
from .neural import QNetwork

OPTIMAL = "Optimal"


@dataclass(frozen=True)
class EvalRecord:
    chi_id: int
    method: str
    status: str
    J: float | None
    wall_time: float
    N_p: int

    def __post_init__(self):
        if (self.J is None) == (self.status == "Optimal"):
            raise ValueError("J must be present exactly when the status is Optimal")


@dataclass(frozen=True)
class MetricsSummary:
    method: str
    N_p: int
    instances: int
    optimality_gap_pct: float | None
    infeasibility_rate_per_1000: float
    time_mean_ms: float
    time_max_ms: float
    time_std_ms: float
    reduction_factor_max: float | None
    gap_instances: int
    gap_excluded: int

    TIMING_FIELDS = ("time_mean_ms", "time_max_ms", "time_std_ms", "reduction_factor_max")

    def deterministic(self) -> dict:
        """Fields that do not depend on wall-clock measurements."""
        return {k: v for k, v in asdict(self).items() if k not in self.TIMING_FIELDS}

    def timing(self) -> dict:
        return {"method": self.method, "N_p": self.N_p, **{k: getattr(self, k) for k in self.TIMING_FIELDS}}


Policy = Callable[[AugmentedState], "PolicyOutcome"]


@dataclass(frozen=True)
class PolicyOutcome:
    status: LpStatus
    objective: float | None
    wall_time: float


class LearnedPolicy:
    """Greedy network decode followed by the fixed-binary LP."""

    def __init__(self, net: QNetwork, scaler: FeatureScaler, env: MicrogridEnv):
        self.net, self.scaler, self.env = net, scaler, env

    def __call__(self, chi: AugmentedState) -> PolicyOutcome:
        r = infer(self.net, self.scaler, self.env, chi)
        return PolicyOutcome(r.status, r.objective, r.wall_time)


class FixedBinaryPolicy:
    """Applies binaries from a callback ``chi -> eps_d``; used for harness checks."""

    def __init__(self, env: MicrogridEnv, choose: Callable[[AugmentedState], np.ndarray]):
        self.env, self.choose = env, choose

    def __call__(self, chi: AugmentedState) -> PolicyOutcome:
        t0 = time.perf_counter()
        sol = self.env.solve_fixed(chi, np.asarray(self.choose(chi), dtype=float))
        return PolicyOutcome(sol.status, sol.objective, time.perf_counter() - t0)


def sample_pool(env: MicrogridEnv, size: int, seed: int) -> list[AugmentedState]:
    rng = np.random.default_rng(seed)
    return [env.sample_initial(rng) for _ in range(size)]


def solve_optimal(env: MicrogridEnv, chi: AugmentedState, bnb: BnbConfig | None = None):
    """Exact MILP with identical generators ordered (same optimal cost, smaller tree)."""
    problem = build_mpc_problem(env.params, env.N_p, order_units=True)
    return solve_milp(build_milp(problem, chi), bnb)


def summarize(records: list[EvalRecord], method: str, N_p: int, gap_floor: float = 1e-3) -> MetricsSummary:
    mine = [r for r in records if r.method == method]
    opt = {r.chi_id: r for r in records if r.method == OPTIMAL}
    n = len(mine)
    infeasible = sum(r.status == LpStatus.INFEASIBLE.value for r in mine)
    gaps, excluded = [], 0
    for r in mine:
        o = opt.get(r.chi_id)
        if r.J is None or o is None or o.J is None:
            continue
        if abs(o.J) <= gap_floor:
            excluded += 1
            continue
        # relative to |J_optimal| so the sign of the gap means "worse than optimal"
        gaps.append((r.J - o.J) / abs(o.J) * 100.0)
    times = np.array([r.wall_time for r in mine]) * 1000.0 if mine else np.zeros(1)
    opt_times = [r.wall_time for r in opt.values()]
    reduction = None
    if opt_times and times.max() > 0:
        reduction = float(max(opt_times) * 1000.0 / times.max())
    return MetricsSummary(
        method=method, N_p=N_p, instances=n,
        optimality_gap_pct=float(np.mean(gaps)) if gaps else None,
        infeasibility_rate_per_1000=1000.0 * infeasible / n if n else 0.0,
        time_mean_ms=float(times.mean()), time_max_ms=float(times.max()), time_std_ms=float(times.std()),
        reduction_factor_max=reduction, gap_instances=len(gaps), gap_excluded=excluded,
    )


def evaluate(env: MicrogridEnv, methods: dict[str, Policy], pool_size: int, seed: int,
             bnb: BnbConfig | None = None, gap_floor: float = 1e-3,
             progress: Callable[[int], None] | None = None) -> tuple[list[EvalRecord], list[MetricsSummary]]:
    """Run the exact solver and every method on a seeded pool of held-out states."""
    pool = sample_pool(env, pool_size, seed)
    records: list[EvalRecord] = []
    for i, chi in enumerate(pool):
        sol = solve_optimal(env, chi, bnb)
        # NodeLimit incumbents are not proven optimal and do not enter the gap
        J = sol.objective if sol.status is MilpStatus.OPTIMAL else None
        records.append(EvalRecord(i, OPTIMAL, sol.status.value, J, sol.wall_time, env.N_p))
        for name, policy in methods.items():
            out = policy(chi)
            J = out.objective if out.status is LpStatus.OPTIMAL else None
            records.append(EvalRecord(i, name, out.status.value, J, out.wall_time, env.N_p))
        if progress is not None:
            progress(i)
    names = [OPTIMAL, *methods]
    return records, [summarize(records, m, env.N_p, gap_floor) for m in names]


def write_records(records: list[EvalRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chi_id", "method", "status", "J", "wall_time", "N_p"])
        for r in records:
            w.writerow([r.chi_id, r.method, r.status, "" if r.J is None else repr(r.J), repr(r.wall_time), r.N_p])


def write_summaries(summaries: list[MetricsSummary], directory: str | Path, extra: dict | None = None) -> None:
    """``summary.json`` holds the reproducible metrics; wall-clock statistics go to ``timing.json``."""
    d = Path(directory)
    summary = {"methods": {s.method: s.deterministic() for s in summaries}, **(extra or {})}
    timing = {"methods": {s.method: s.timing() for s in summaries}}
    (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (d / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
