"""Dense two-phase simplex for linear programs ``min c^T x  s.t.  G x <= h``.

The variables of the inequality-form problem are free, so instead of splitting
every column into a positive and negative part the solver works on the dual,
which is already in standard form::

    min  h^T y   s.t.  G^T y = -c,  y >= 0

Its simplex multipliers are exactly the primal ``x``. The dual tableau has one
row per primal variable, which keeps it small for the MPC problems built in
this package (many more constraint rows than variables).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

FEAS_TOL = 1e-6
OPT_TOL = 1e-9
PIVOT_TOL = 1e-9
STALL_THRESHOLD = 50
REFRESH_EVERY = 100
# a terminal verdict after this many pivots since the last rebuild triggers a rebuild first
VERIFY_AFTER = 10
# a ray must improve the objective by more than this (relative) to count as unbounded
RAY_TOL = 1e-7
HARRIS_TOL = 1e-9
REFINE_ABOVE = 1e-10


class LpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL = "NumericalFailure"


@dataclass(frozen=True)
class LinearProgram:
    """``min c^T x + offset  s.t.  G x <= h,  lo <= x <= hi``.

    ``lo``/``hi`` are optional per-coordinate bounds; infinite entries mean no
    bound. They are folded into extra rows of ``G`` before solving.
    """

    c: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        p = c.shape[0]
        G = np.asarray(self.G, dtype=float)
        if G.size == 0:
            G = np.zeros((G.shape[0] if G.ndim == 2 else 0, p))
        h = np.atleast_1d(np.asarray(self.h, dtype=float)) if np.size(self.h) else np.zeros(0)
        if G.ndim != 2 or G.shape[1] != p:
            raise ValueError(f"G must have {p} columns, got shape {G.shape}")
        if h.shape != (G.shape[0],):
            raise ValueError(f"h must have length {G.shape[0]}, got shape {h.shape}")
        for name, arr in (("c", c), ("G", G), ("h", h)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        for name in ("lo", "hi"):
            val = getattr(self, name)
            if val is not None:
                val = np.broadcast_to(np.asarray(val, dtype=float), (p,)).copy()
                if np.any(np.isnan(val)):
                    raise ValueError(f"{name} has NaN entries")
                object.__setattr__(self, name, val)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    @property
    def n_rows(self) -> int:
        return self.G.shape[0]

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        """Constraint rows with finite variable bounds appended as ``-x <= -lo`` / ``x <= hi``."""
        G, h = [self.G], [self.h]
        eye = np.eye(self.n_vars)
        if self.lo is not None:
            idx = np.flatnonzero(np.isfinite(self.lo))
            G.append(-eye[idx])
            h.append(-self.lo[idx])
        if self.hi is not None:
            idx = np.flatnonzero(np.isfinite(self.hi))
            G.append(eye[idx])
            h.append(self.hi[idx])
        return np.vstack(G), np.concatenate(h)

    def objective(self, x) -> float:
        return float(self.c @ np.asarray(x, dtype=float) + self.offset)

    def max_violation(self, x) -> float:
        G, h = self.folded()
        if G.shape[0] == 0:
            return 0.0
        return float(np.max(G @ np.asarray(x, dtype=float) - h))

    def to_json(self) -> str:
        """Debug dump of the problem data."""
        def enc(a):
            return None if a is None else [v if np.isfinite(v) else str(v) for v in np.ravel(a)]
        return json.dumps({
            "c": self.c.tolist(), "G": self.G.tolist(), "h": self.h.tolist(),
            "lo": enc(self.lo), "hi": enc(self.hi), "offset": self.offset,
        })


@dataclass(frozen=True)
class LpSolution:
    status: LpStatus
    primal: np.ndarray | None
    objective: float | None
    iterations: int
    # final simplex basis, reusable as a warm start for an LP differing only in h, lo, hi
    basis: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


class _Tableau:
    """Standard-form simplex ``min f^T y, A y = b, y >= 0`` with artificial columns kept.

    Pivots update the tableau in place; every ``REFRESH_EVERY`` pivots and
    before any terminal verdict the tableau is rebuilt from the original data
    and the current basis, so accumulated round-off cannot fake a result.
    """

    def __init__(self, A: np.ndarray, b: np.ndarray, f: np.ndarray, max_iter: int):
        m, n = A.shape
        self.m, self.n = m, n
        self.row_sign = np.where(b < 0, -1.0, 1.0)
        T = np.empty((m, n + m + 1))
        T[:, :n] = A * self.row_sign[:, None]
        T[:, n:n + m] = np.eye(m)
        T[:, -1] = b * self.row_sign
        self.T0 = T.copy()
        self.T = T
        self.f = f
        self.basis = np.arange(n, n + m)
        self.iterations = 0
        self.max_iter = max_iter

    def _zrow(self, cost: np.ndarray) -> np.ndarray:
        full = np.append(cost, 0.0)
        return full - cost[self.basis] @ self.T

    def _reinvert(self) -> bool:
        try:
            self.T = np.linalg.solve(self.T0[:, self.basis], self.T0)
        except np.linalg.LinAlgError:
            return False
        # basic columns are exact unit vectors by construction
        self.T[:, self.basis] = np.eye(self.m)
        return True

    def _pivot(self, z: np.ndarray, r: int, j: int) -> None:
        T = self.T
        T[r] /= T[r, j]
        col = T[:, j].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        z -= z[j] * T[r]
        self.basis[r] = j
        self.iterations += 1

    def _ratio_row(self, col: np.ndarray, bland: bool) -> int | None:
        T = self.T
        rows = np.flatnonzero(col > PIVOT_TOL)
        if rows.size == 0:
            return None
        rhs = np.maximum(T[rows, -1], 0.0)
        if bland:
            ratios = rhs / col[rows]
            best = ratios.min()
            ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
            return int(ties[np.argmin(self.basis[ties])])
        # two-pass (Harris) test: among nearly minimal ratios take the largest pivot
        limit = ((rhs + HARRIS_TOL) / col[rows]).min()
        ok = rows[rhs / col[rows] <= limit]
        return int(ok[np.argmax(col[ok])])

    def _iterate(self, cost: np.ndarray, z: np.ndarray, n_enter: int, bounded: bool = False) -> str:
        """Run pivots until optimal/unbounded; entering columns restricted to ``< n_enter``.

        A column without a pivot row is set aside until the next pivot when its
        reduced cost is only marginally negative, or always when the objective
        is known to be ``bounded`` (phase 1).
        """
        stall = 0
        since_refresh = 0
        fresh = True  # callers hand over a freshly built tableau
        skip: list[int] = []
        scale = max(1.0, float(np.abs(cost).max(initial=0.0)))

        def refresh():
            nonlocal since_refresh, fresh
            if not self._reinvert():
                return False
            z[:] = self._zrow(cost)
            since_refresh, fresh = 0, True
            return True

        while True:
            if self.iterations >= self.max_iter:
                return "limit"
            if since_refresh >= REFRESH_EVERY and not refresh():
                return "limit"
            d = z[:n_enter].copy()
            d[skip] = 0.0
            cand = np.flatnonzero(d < -OPT_TOL)
            if cand.size == 0:
                if not fresh:
                    if not refresh():
                        return "limit"
                    continue
                return "optimal"
            bland = stall >= STALL_THRESHOLD
            j = int(cand[0]) if bland else int(cand[np.argmin(d[cand])])
            r = self._ratio_row(self.T[:, j], bland)
            if r is None:
                if not fresh:
                    if not refresh():
                        return "limit"
                    continue
                if bounded or z[j] > -RAY_TOL * scale:
                    skip.append(j)
                    continue
                return "unbounded"
            degenerate = self.T[r, -1] <= 1e-12
            stall = stall + 1 if degenerate else 0
            self._pivot(z, r, j)
            since_refresh += 1
            fresh = since_refresh < VERIFY_AFTER
            skip.clear()

    def solve(self, warm_basis: np.ndarray | None = None) -> str:
        m, n = self.m, self.n
        cost2 = np.zeros(n + m)
        cost2[:n] = self.f
        if warm_basis is not None and warm_basis.shape == (m,):
            # only the cost changed, so a previous optimal basis is still feasible
            self.basis = np.array(warm_basis, dtype=int)
            if self._reinvert() and self.T[:, -1].min() >= -FEAS_TOL:
                np.maximum(self.T[:, -1], 0.0, out=self.T[:, -1])
                self.z = self._zrow(cost2)
                return self._iterate(cost2, self.z, n)
            self.basis = np.arange(n, n + m)
            self.T = self.T0.copy()
        cost1 = np.zeros(n + m)
        cost1[n:] = 1.0
        z = self._zrow(cost1)
        state = self._iterate(cost1, z, n + m, bounded=True)
        if state == "limit":
            return "limit"
        if not self._reinvert():
            return "limit"
        z[:] = self._zrow(cost1)
        infeas = -z[-1]
        scale = max(1.0, float(np.abs(self.T[:, -1]).max(initial=0.0)))
        if infeas > FEAS_TOL * scale:
            return "infeasible"
        # drive remaining artificials out of the basis where a real column allows it
        for r in np.flatnonzero(self.basis >= n):
            row = self.T[r, :n]
            j = int(np.argmax(np.abs(row))) if n else 0
            if n and abs(row[j]) > 1e-7:
                self._pivot(z, r, j)
        self.z = self._zrow(cost2)
        return self._iterate(cost2, self.z, n)

    def multipliers(self) -> np.ndarray:
        """Simplex multipliers of the original (unnormalized) equality rows."""
        n, m = self.n, self.m
        return -self.z[n:n + m] * self.row_sign

    def values(self) -> np.ndarray:
        y = np.zeros(self.n + self.m)
        y[self.basis] = self.T[:, -1]
        return y[:self.n]


def _max_iter(m: int, n: int) -> int:
    return 50 * (m + n) + 1000


def _primal_feasible(G: np.ndarray, h: np.ndarray) -> tuple[bool, int]:
    """Farkas test: ``G x <= h`` is infeasible iff some ``y >= 0`` has ``G^T y = 0``, ``h^T y < 0``."""
    q, p = G.shape
    A = np.vstack([G.T, np.ones((1, q))])
    b = np.zeros(p + 1)
    b[-1] = 1.0
    tab = _Tableau(A, b, h, _max_iter(p + 1, q))
    state = tab.solve()
    if state != "optimal":
        return True, tab.iterations
    val = float(h @ tab.values())
    scale = max(1.0, float(np.abs(h).max(initial=0.0)))
    return not (val < -FEAS_TOL * scale), tab.iterations


def solve_lp(lp: LinearProgram, warm_basis: np.ndarray | None = None) -> LpSolution:
    """Solve ``lp``; never reports Optimal for a point violating ``G x <= h`` by more than 1e-6.

    ``warm_basis`` is the ``basis`` of an earlier solution of an LP with the same
    ``c`` and ``G`` and the same pattern of finite bounds. The solver works on
    the dual, whose feasible region does not depend on ``h``, so that basis is a
    valid starting point; an unusable one silently falls back to a cold start.
    """
    G, h = lp.folded()
    p = lp.n_vars
    zero_rows = ~np.any(G != 0.0, axis=1)
    if np.any(h[zero_rows] < -FEAS_TOL):
        return LpSolution(LpStatus.INFEASIBLE, None, None, 0)
    G, h = G[~zero_rows], h[~zero_rows]
    if p == 0:
        return LpSolution(LpStatus.OPTIMAL, np.zeros(0), lp.offset, 0)
    if G.shape[0] == 0:
        if np.all(lp.c == 0.0):
            return LpSolution(LpStatus.OPTIMAL, np.zeros(p), lp.offset, 0)
        return LpSolution(LpStatus.UNBOUNDED, None, None, 0)

    # equilibrate rows; x is unaffected, only the dual variables are rescaled
    G0, h0 = G, h
    norms = np.abs(G).max(axis=1)
    G, h = G / norms[:, None], h / norms
    tab = _Tableau(G.T, -lp.c, h, _max_iter(p, G.shape[0]))
    state = tab.solve(warm_basis)
    if state == "limit":
        return LpSolution(LpStatus.NUMERICAL, None, None, tab.iterations)
    if state == "unbounded":
        return LpSolution(LpStatus.INFEASIBLE, None, None, tab.iterations, tab.basis.copy())
    if state == "infeasible":
        feasible, extra = _primal_feasible(G, h)
        status = LpStatus.UNBOUNDED if feasible else LpStatus.INFEASIBLE
        return LpSolution(status, None, None, tab.iterations + extra)

    x = tab.multipliers()
    # one refinement step on the active rows (basic dual variables) against the original data
    active = tab.basis[tab.basis < tab.n]
    if active.size and np.max(G @ x - h) > REFINE_ABOVE:
        dx = np.linalg.lstsq(G[active], h[active] - G[active] @ x, rcond=None)[0]
        refined = x + dx
        if np.max(G @ refined - h) <= np.max(G @ x - h):
            x = refined
    viol = float(np.max(G0 @ x - h0))
    if viol > FEAS_TOL:
        return LpSolution(LpStatus.NUMERICAL, None, None, tab.iterations)
    return LpSolution(LpStatus.OPTIMAL, x, lp.objective(x), tab.iterations, tab.basis.copy())
