"""Branch-and-bound over binary coordinates of a compact MILP."""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .lp import LinearProgram, LpStatus, solve_lp


class NodeStrategy(str, Enum):
    BEST_BOUND = "BestBound"
    DEPTH_FIRST = "DepthFirst"


class BranchRule(str, Enum):
    MOST_FRACTIONAL = "MostFractional"
    FIRST_FRACTIONAL = "FirstFractional"


class MilpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    NODE_LIMIT = "NodeLimit"
    NUMERICAL = "NumericalFailure"


@dataclass(frozen=True)
class CompactMilp:
    """``min c^T eps  s.t.  G eps <= h`` with ``eps[binary_index_set]`` in {0, 1}."""

    lp: LinearProgram
    binary_index_set: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.binary_index_set)
        if list(idx) != sorted(set(idx)):
            raise ValueError("binary_index_set must be sorted and unique")
        if idx and (idx[0] < 0 or idx[-1] >= self.lp.n_vars):
            raise ValueError("binary_index_set out of range")
        object.__setattr__(self, "binary_index_set", idx)

    @property
    def continuous_index_set(self) -> np.ndarray:
        mask = np.ones(self.lp.n_vars, dtype=bool)
        mask[list(self.binary_index_set)] = False
        return np.flatnonzero(mask)


@dataclass(frozen=True)
class BnbConfig:
    integrality_tol: float = 1e-6
    rel_gap_tol: float = 1e-8
    node_strategy: NodeStrategy = NodeStrategy.BEST_BOUND
    branch_rule: BranchRule = BranchRule.MOST_FRACTIONAL
    node_limit: int = 100_000
    debug: bool = False

    def __post_init__(self):
        if self.integrality_tol <= 0 or self.rel_gap_tol <= 0:
            raise ValueError("tolerances must be positive")
        object.__setattr__(self, "node_strategy", NodeStrategy(self.node_strategy))
        object.__setattr__(self, "branch_rule", BranchRule(self.branch_rule))


@dataclass
class MilpSolution:
    status: MilpStatus
    primal: np.ndarray | None
    objective: float | None
    nodes_explored: int
    wall_time: float
    best_bound: float | None = None

    @property
    def optimal(self) -> bool:
        return self.status is MilpStatus.OPTIMAL


def fix_binaries(m: CompactMilp, eps_d) -> LinearProgram:
    """The LP over the continuous coordinates obtained by fixing every binary to ``eps_d``."""
    eps_d = np.atleast_1d(np.asarray(eps_d, dtype=float))
    b = m.binary_index_set
    if eps_d.shape != (len(b),):
        raise ValueError(f"expected {len(b)} binary values, got shape {eps_d.shape}")
    if not np.all((eps_d == 0.0) | (eps_d == 1.0)):
        raise ValueError("binary values must be exactly 0 or 1")
    if not b:
        return m.lp
    lp = m.lp
    keep = m.continuous_index_set
    bi = np.asarray(b)
    lo = None if lp.lo is None else lp.lo[keep]
    hi = None if lp.hi is None else lp.hi[keep]
    if (lp.lo is not None and np.any(eps_d < lp.lo[bi])) or (lp.hi is not None and np.any(eps_d > lp.hi[bi])):
        return LinearProgram(lp.c[keep], np.zeros((1, keep.size)), [-1.0], lo=lo, hi=hi)
    return LinearProgram(
        lp.c[keep], lp.G[:, keep], lp.h - lp.G[:, bi] @ eps_d, lo=lo, hi=hi,
        offset=lp.offset + float(lp.c[bi] @ eps_d),
    )


def assemble(m: CompactMilp, eps_c, eps_d) -> np.ndarray:
    """Full decision vector from its continuous and binary parts."""
    full = np.zeros(m.lp.n_vars)
    full[m.continuous_index_set] = eps_c
    full[list(m.binary_index_set)] = eps_d
    return full


@dataclass(order=True)
class _Node:
    bound: float
    order: int
    fixed: dict = field(compare=False)
    x: np.ndarray = field(compare=False)
    basis: np.ndarray | None = field(compare=False, default=None)
    depth: int = field(compare=False, default=0)


class _NodeLps:
    """LP relaxations of one MILP under binary fixings.

    Every node shares ``c`` and ``G`` and only tightens binary bounds, so a
    parent's final basis warm-starts its children.
    """

    def __init__(self, m: CompactMilp):
        lp = m.lp
        p = lp.n_vars
        self.lp = lp
        self.binaries = np.asarray(m.binary_index_set, dtype=int)
        self.lo = np.full(p, -np.inf) if lp.lo is None else lp.lo.copy()
        self.hi = np.full(p, np.inf) if lp.hi is None else lp.hi.copy()
        b = self.binaries
        self.lo[b] = np.maximum(self.lo[b], 0.0)
        self.hi[b] = np.minimum(self.hi[b], 1.0)

    def solve(self, fixed: dict[int, float], warm: np.ndarray | None):
        lo, hi = self.lo.copy(), self.hi.copy()
        if fixed:
            idx = np.fromiter(fixed.keys(), dtype=int, count=len(fixed))
            val = np.fromiter(fixed.values(), dtype=float, count=len(fixed))
            lo[idx] = np.maximum(lo[idx], val)
            hi[idx] = np.minimum(hi[idx], val)
        if np.any(lo > hi):
            return LpStatus.INFEASIBLE, None, None, None
        lp = self.lp
        sol = solve_lp(LinearProgram(lp.c, lp.G, lp.h, lo=lo, hi=hi, offset=lp.offset), warm)
        if sol.status is not LpStatus.OPTIMAL:
            return sol.status, None, None, None
        x = sol.primal.copy()
        if fixed:
            x[idx] = val
        return sol.status, x, sol.objective, sol.basis


def solve_milp(m: CompactMilp, cfg: BnbConfig | None = None) -> MilpSolution:
    """Global optimum by LP-based branch-and-bound.

    Best-bound search with a depth-first dive until the first incumbent. Nodes
    are solved when created, so the open list is keyed by exact LP bounds.
    """
    cfg = cfg or BnbConfig()
    t0 = time.perf_counter()
    lps = _NodeLps(m)
    binaries = lps.binaries
    counter = itertools.count()
    nodes = 0
    incumbent, inc_obj = None, np.inf

    def solve_node(fixed, warm):
        nonlocal nodes
        nodes += 1
        return lps.solve(fixed, warm)

    def prune_level():
        return inc_obj - cfg.rel_gap_tol * max(1.0, abs(inc_obj))

    def finish(status):
        bound = inc_obj if status is MilpStatus.OPTIMAL else None
        if status is MilpStatus.NODE_LIMIT:
            bounds = [n.bound for n in open_nodes] + [n.bound for n in dive]
            bound = min(bounds) if bounds else inc_obj
        obj = None if incumbent is None else float(inc_obj)
        return MilpSolution(status, incumbent, obj, nodes, time.perf_counter() - t0, bound)

    open_nodes: list[_Node] = []
    dive: list[_Node] = []
    status, x, obj, basis = solve_node({}, None)
    if status is LpStatus.NUMERICAL:
        return finish(MilpStatus.NUMERICAL)
    if status is not LpStatus.OPTIMAL:
        # an LP relaxation that is unbounded leaves the MILP unbounded or infeasible;
        # the binary-only MPC problems built here are always bounded
        return finish(MilpStatus.INFEASIBLE)
    root = _Node(obj, next(counter), {}, x, basis, 0)
    use_dive = cfg.node_strategy is NodeStrategy.BEST_BOUND
    dive.append(root)

    while dive or open_nodes:
        if dive:
            node = dive.pop()
        else:
            node = heapq.heappop(open_nodes)
        if incumbent is not None and node.bound >= prune_level():
            continue
        xb = node.x[binaries] if binaries.size else np.zeros(0)
        frac = np.abs(xb - np.round(xb))
        cand = np.flatnonzero(frac > cfg.integrality_tol)
        if cand.size == 0:
            # re-solve with every binary fixed to its rounded value
            eps_d = np.round(xb)
            st, fx, fobj, _ = lps.solve(dict(zip(binaries.tolist(), eps_d.tolist())), node.basis)
            if st is LpStatus.OPTIMAL and fobj < inc_obj:
                incumbent, inc_obj = fx, fobj
                if use_dive and dive:
                    for n in dive:
                        heapq.heappush(open_nodes, n)
                    dive.clear()
            continue
        if cfg.branch_rule is BranchRule.MOST_FRACTIONAL:
            # maximal distance to the nearest integer, ties to the lowest index
            pick = int(cand[np.argmax(frac[cand])])
        else:
            pick = int(cand[0])
        j = int(binaries[pick])
        up_first = xb[pick] >= 0.5
        children = []
        for val in ((1, 0) if up_first else (0, 1)):
            if nodes >= cfg.node_limit:
                return finish(MilpStatus.NODE_LIMIT)
            fixed = dict(node.fixed)
            fixed[j] = val
            st, cx, cobj, cbasis = solve_node(fixed, node.basis)
            if st is LpStatus.NUMERICAL:
                return finish(MilpStatus.NUMERICAL)
            if st is not LpStatus.OPTIMAL:
                continue
            if cfg.debug and cobj < node.bound - 1e-7 * max(1.0, abs(node.bound)):
                raise AssertionError(f"child bound {cobj} below parent bound {node.bound}")
            if incumbent is not None and cobj >= prune_level():
                continue
            children.append(_Node(cobj, next(counter), fixed, cx, cbasis, node.depth + 1))
        in_dive = cfg.node_strategy is NodeStrategy.DEPTH_FIRST or (use_dive and incumbent is None)
        if in_dive:
            # preferred child is explored first, so it goes on top of the stack
            dive.extend(reversed(children))
        else:
            for child in children:
                heapq.heappush(open_nodes, child)

    if incumbent is None:
        return finish(MilpStatus.INFEASIBLE)
    return finish(MilpStatus.OPTIMAL)
