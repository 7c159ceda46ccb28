"""Brute-force reference solvers used by the tests."""

from __future__ import annotations

import itertools

import numpy as np

from mldrl.lp import LinearProgram, solve_lp
from mldrl.milp import CompactMilp, fix_binaries


def vertex_enumeration(lp: LinearProgram, tol: float = 1e-7):
    """Minimum of ``c^T x`` over all feasible basic solutions, or None when there are none.

    Only valid for bounded problems, where an optimum is attained at a vertex.
    """
    G, h = lp.folded()
    q, p = G.shape
    if p == 0:
        return lp.offset
    combos = np.array(list(itertools.combinations(range(q), p)))
    if combos.size == 0:
        return None
    A = G[combos]          # (K, p, p)
    b = h[combos]          # (K, p)
    det = np.linalg.det(A)
    ok = np.abs(det) > 1e-10
    if not np.any(ok):
        return None
    x = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    feasible = np.all(x @ G.T <= h + tol, axis=1)
    if not np.any(feasible):
        return None
    return float(np.min(x[feasible] @ lp.c) + lp.offset)


def random_bounded_lp(rng: np.random.Generator, max_vars: int = 6, max_rows: int = 12) -> LinearProgram:
    p = int(rng.integers(1, max_vars + 1))
    q = int(rng.integers(1, max_rows + 1))
    G = rng.normal(size=(q, p))
    h = rng.normal(size=q) * 2.0
    return LinearProgram(rng.normal(size=p), G, h, lo=-5.0, hi=5.0)


def random_milp(rng: np.random.Generator, max_binaries: int = 8, max_continuous: int = 12) -> CompactMilp:
    nb = int(rng.integers(1, max_binaries + 1))
    nc = int(rng.integers(0, max_continuous + 1))
    p = nb + nc
    q = int(rng.integers(2, 15))
    G = rng.normal(size=(q, p))
    h = rng.normal(size=q) * 2.0 + 1.0
    lo = np.r_[np.full(nc, -5.0), np.zeros(nb)]
    hi = np.r_[np.full(nc, 5.0), np.ones(nb)]
    return CompactMilp(LinearProgram(rng.normal(size=p), G, h, lo=lo, hi=hi), tuple(range(nc, p)))


def enumerate_milp(m: CompactMilp):
    """Best objective over all binary assignments and the first assignment attaining it."""
    best, arg = None, None
    for bits in itertools.product((0.0, 1.0), repeat=len(m.binary_index_set)):
        sol = solve_lp(fix_binaries(m, np.array(bits)))
        if sol.optimal and (best is None or sol.objective < best - 1e-12):
            best, arg = sol.objective, np.array(bits)
    return best, arg


def piecewise_feasible(params, x_b: float, gamma_l, d, tol: float = 1e-6):
    """Literal piecewise microgrid conditions for one step.

    ``d`` is a :class:`MicrogridDecision`. Returns ``(feasible, next_x_b)`` where
    the next level uses the charge/discharge branch selected by the sign of P_b.
    """
    from mldrl.microgrid import P_LOAD, P_RES, storage_update

    g = np.asarray(gamma_l, dtype=float)
    off = params.sign_offset
    ok = True
    for flag, P, lo, hi in ((d.delta_b, d.P_b, params.P_b_min, params.P_b_max),
                            (d.delta_grid, d.P_grid, params.P_grid_min, params.P_grid_max)):
        ok &= lo - tol <= P <= hi + tol
        # indicator is 1 exactly when the power is nonnegative (negative means at most -offset)
        ok &= (P >= -tol) if flag == 1 else (P <= -off + tol)
    ok &= abs(d.z_b - d.delta_b * d.P_b) <= tol
    ok &= abs(d.z_grid - d.delta_grid * d.P_grid) <= tol
    for on, P in zip(d.delta_dis, d.P_dis):
        if on:
            ok &= params.P_dis_min - tol <= P <= params.P_dis_max + tol
        else:
            ok &= abs(P) <= tol
    balance = d.P_b - (sum(d.P_dis) + g[P_RES] + d.P_grid - g[P_LOAD])
    ok &= abs(balance) <= tol
    x_next = storage_update(params, x_b, d.P_b)
    ok &= params.x_b_min - tol <= x_next <= params.x_b_max + tol
    return bool(ok), x_next


def hand_assembled_horizon(params, x_b0: float, gamma_rows, order_units: bool = False) -> CompactMilp:
    """Horizon MILP written directly from the piecewise model, keeping the storage
    levels as decision variables tied together by equality rows.

    Per step the variables are ``P_b, P_grid, P_dis(N), z_b, z_grid, x_next,
    delta_b, delta_grid, delta_dis(N)``; the binaries are placed last overall.
    """
    from mldrl.microgrid import C_BUY, C_PROD, C_SELL, P_LOAD, P_RES

    N = params.N_gen
    gamma_rows = np.asarray(gamma_rows, dtype=float)
    N_p = len(gamma_rows)
    n_cont, n_bin = 5 + N, 2 + N
    n = N_p * (n_cont + n_bin)

    def cont(l, j):
        return l * n_cont + j

    def binary(l, j):
        return N_p * n_cont + l * n_bin + j

    rows, rhs = [], []

    def le(coeffs, b):
        r = np.zeros(n)
        for j, v in coeffs:
            r[j] += v
        rows.append(r)
        rhs.append(b)

    def eq(coeffs, b):
        le(coeffs, b)
        le([(j, -v) for j, v in coeffs], -b)

    c = np.zeros(n)
    lo, hi = np.zeros(n), np.ones(n)
    off = params.sign_offset
    for l, g in enumerate(gamma_rows):
        Pb, Pg, Zb, Zg, Xn = cont(l, 0), cont(l, 1), cont(l, 2 + N), cont(l, 3 + N), cont(l, 4 + N)
        Pd = [cont(l, 2 + i) for i in range(N)]
        Db, Dg = binary(l, 0), binary(l, 1)
        Dd = [binary(l, 2 + i) for i in range(N)]
        lo[[Pb, Pg]] = params.P_b_min, params.P_grid_min
        hi[[Pb, Pg]] = params.P_b_max, params.P_grid_max
        lo[Pd], hi[Pd] = 0.0, params.P_dis_max
        lo[[Zb, Zg]] = params.P_b_min, params.P_grid_min
        hi[[Zb, Zg]] = params.P_b_max, params.P_grid_max
        lo[Xn], hi[Xn] = params.x_b_min, params.x_b_max
        for P, Z, D, pl, ph in ((Pb, Zb, Db, params.P_b_min, params.P_b_max),
                                (Pg, Zg, Dg, params.P_grid_min, params.P_grid_max)):
            # P >= pl (1 - D) and P <= -off + (ph + off) D
            le([(P, -1.0), (D, -pl)], -pl)
            le([(P, 1.0), (D, -(ph + off))], -off)
            # Z = D * P
            le([(Z, 1.0), (D, -ph)], 0.0)
            le([(Z, -1.0), (D, pl)], 0.0)
            le([(Z, 1.0), (P, -1.0), (D, -pl)], -pl)
            le([(Z, -1.0), (P, 1.0), (D, ph)], ph)
        for P, D in zip(Pd, Dd):
            le([(P, 1.0), (D, -params.P_dis_max)], 0.0)
            le([(P, -1.0), (D, params.P_dis_min)], 0.0)
        if order_units:
            for i in range(N - 1):
                le([(Dd[i + 1], 1.0), (Dd[i], -1.0)], 0.0)
        eq([(Pb, 1.0), (Pg, -1.0), *((P, -1.0) for P in Pd)], g[P_RES] - g[P_LOAD])
        # x_next = x_prev + T_s eta_c z_b + T_s / eta_d (P_b - z_b)
        prev = [] if l == 0 else [(cont(l - 1, 4 + N), -1.0)]
        const = x_b0 if l == 0 else 0.0
        eq([(Xn, 1.0), *prev, (Zb, -params.T_s * params.eta_c), (Pb, -params.T_s / params.eta_d),
            (Zb, params.T_s / params.eta_d)], const)
        c[Pg] = g[C_SELL]
        c[Zg] = g[C_BUY] - g[C_SELL]
        c[Pd] = g[C_PROD]
    lp = LinearProgram(c, np.array(rows), np.array(rhs), lo=lo, hi=hi)
    return CompactMilp(lp, tuple(range(N_p * n_cont, n)))


def random_decision_tuple(params, rng: np.random.Generator):
    """A random ``(x_b, gamma_l, decision)`` that is consistent most of the time and
    has one randomly chosen piece broken otherwise."""
    from mldrl.microgrid import MicrogridDecision

    N = params.N_gen
    off = params.sign_offset
    P_b = float(rng.choice([rng.uniform(params.P_b_min, -off), rng.uniform(0.0, params.P_b_max), 0.0]))
    P_grid = float(rng.choice([rng.uniform(-300.0, -off), rng.uniform(0.0, 300.0), 0.0]))
    on = rng.integers(0, 2, size=N)
    P_dis = np.where(on == 1, rng.uniform(params.P_dis_min, params.P_dis_max, size=N), 0.0)
    P_res = float(rng.uniform(0.0, 250.0))
    # P_load closes the balance P_b = sum P_dis + P_res + P_grid - P_load when nonnegative
    P_load = max(float(P_dis.sum() + P_res + P_grid - P_b), 0.0)
    x_b = float(rng.uniform(params.x_b_min - 20.0, params.x_b_max + 20.0))
    delta_b, delta_grid = int(P_b >= 0), int(P_grid >= 0)
    z_b, z_grid = delta_b * P_b, delta_grid * P_grid
    broken = int(rng.integers(0, 8))
    if broken == 0:
        delta_b = 1 - delta_b
    elif broken == 1:
        delta_grid = 1 - delta_grid
    elif broken == 2:
        z_b += float(rng.normal(scale=5.0))
    elif broken == 3:
        z_grid += float(rng.normal(scale=5.0))
    elif broken == 4:
        on[int(rng.integers(N))] ^= 1
    elif broken == 5:
        P_load += float(rng.uniform(1.0, 20.0))
    gamma_l = np.array([rng.uniform(0.05, 0.3), rng.uniform(0.0, 0.05), rng.uniform(0.1, 0.3), P_res, P_load])
    d = MicrogridDecision(delta_b, delta_grid, tuple(int(v) for v in on), P_b, P_grid,
                          tuple(float(v) for v in P_dis), float(z_b), float(z_grid))
    return x_b, gamma_l, d


def finite_difference_errors(net, inputs, weights, step: float = 1e-6) -> dict[str, float]:
    """Relative error per parameter tensor between BPTT and central differences
    for the loss ``sum(weights * Q)``."""
    from mldrl.neural import backward, forward_unrolled

    _, trace = forward_unrolled(net, inputs)
    grads = backward(net, trace, weights)
    errors = {}
    for name, arr in net.params().items():
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + step
            up = float(np.sum(weights * forward_unrolled(net, inputs)[0]))
            arr[idx] = keep - step
            down = float(np.sum(weights * forward_unrolled(net, inputs)[0]))
            arr[idx] = keep
            numeric[idx] = (up - down) / (2.0 * step)
        denom = max(np.linalg.norm(numeric) + np.linalg.norm(grads[name]), 1e-12)
        errors[name] = float(np.linalg.norm(numeric - grads[name]) / denom)
    return errors
