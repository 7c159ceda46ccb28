"""Compile MLD systems into parametric MILPs and run receding-horizon control.

Decision vector layout (``eps = [eps_c; eps_d]``)::

    eps_c = [u_c(0), z(0), u_c(1), z(1), ..., u_c(N_p-1), z(N_p-1)]
    eps_d = [u_d(0), delta(0), ..., u_d(N_p-1), delta(N_p-1)]

Predicted states are eliminated by substitution, so every row of the compiled
problem is an MLD inequality at some horizon step with ``x(k+l)`` written as an
affine function of ``x(k)`` and ``eps``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Union

import numpy as np

from .lp import LinearProgram, LpStatus, solve_lp
from .milp import BnbConfig, CompactMilp, MilpStatus, fix_binaries, solve_milp
from .mld import AugmentedState, MldDims, MldStep, MldSystem, step, validate


@dataclass(frozen=True)
class HorizonLayout:
    N_p: int
    m_c: int
    r_c: int
    m_d: int
    r_d: int
    gamma_step: int = 0
    u_c_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    u_d_names: tuple[str, ...] = ()
    delta_names: tuple[str, ...] = ()
    gamma_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.N_p < 1:
            raise ValueError("N_p must be at least 1")
        for attr, size, prefix in (("u_c_names", self.m_c, "u_c"), ("z_names", self.r_c, "z"),
                                   ("u_d_names", self.m_d, "u_d"), ("delta_names", self.r_d, "delta"),
                                   ("gamma_names", self.gamma_step, "gamma")):
            names = tuple(getattr(self, attr)) or tuple(f"{prefix}{i}" for i in range(size))
            if len(names) != size:
                raise ValueError(f"{attr} needs {size} names, got {len(names)}")
            object.__setattr__(self, attr, names)

    @classmethod
    def from_dims(cls, dims: MldDims, N_p: int, gamma_step: int = 0, **names) -> "HorizonLayout":
        return cls(N_p, dims.m_c, dims.r_c, dims.m_d, dims.r_d, gamma_step, **names)

    @property
    def n_cont_step(self) -> int:
        return self.m_c + self.r_c

    @property
    def n_disc_step(self) -> int:
        return self.m_d + self.r_d

    @property
    def n_cont(self) -> int:
        return self.N_p * self.n_cont_step

    @property
    def n_disc(self) -> int:
        return self.N_p * self.n_disc_step

    @property
    def n_eps(self) -> int:
        return self.n_cont + self.n_disc

    @property
    def n_gamma(self) -> int:
        return self.N_p * self.gamma_step

    @property
    def step_names(self) -> tuple[str, ...]:
        return self.u_c_names + self.z_names + self.u_d_names + self.delta_names

    def cont_slice(self, l: int) -> slice:
        a = l * self.n_cont_step
        return slice(a, a + self.n_cont_step)

    def disc_slice(self, l: int) -> slice:
        a = self.n_cont + l * self.n_disc_step
        return slice(a, a + self.n_disc_step)

    def step_indices(self, l: int) -> dict[str, np.ndarray]:
        """Positions inside ``eps`` of the step-``l`` blocks."""
        c0 = l * self.n_cont_step
        d0 = self.n_cont + l * self.n_disc_step
        return {
            "u_c": np.arange(c0, c0 + self.m_c),
            "z": np.arange(c0 + self.m_c, c0 + self.n_cont_step),
            "u_d": np.arange(d0, d0 + self.m_d),
            "delta": np.arange(d0 + self.m_d, d0 + self.n_disc_step),
        }

    def pack(self, u_c, z, u_d, delta) -> np.ndarray:
        """Stack per-step arrays of shape ``(N_p, size)`` into ``eps``."""
        N = self.N_p
        u_c, z, u_d, delta = (np.asarray(a, dtype=float).reshape(N, -1) if np.size(a) else np.zeros((N, 0))
                              for a in (u_c, z, u_d, delta))
        cont = np.hstack([u_c, z]).ravel()
        disc = np.hstack([u_d, delta]).ravel()
        return np.concatenate([cont, disc])

    def unpack(self, eps) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        eps = np.asarray(eps, dtype=float)
        if eps.shape != (self.n_eps,):
            raise ValueError(f"expected a decision vector of length {self.n_eps}, got {eps.shape}")
        cont = eps[:self.n_cont].reshape(self.N_p, self.n_cont_step)
        disc = eps[self.n_cont:].reshape(self.N_p, self.n_disc_step)
        return cont[:, :self.m_c], cont[:, self.m_c:], disc[:, :self.m_d], disc[:, self.m_d:]

    def pack_gamma(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=float)
        if rows.shape != (self.N_p, self.gamma_step):
            raise ValueError(f"expected gamma rows of shape {(self.N_p, self.gamma_step)}, got {rows.shape}")
        return rows.ravel()

    def unpack_gamma(self, gamma) -> np.ndarray:
        gamma = np.asarray(gamma, dtype=float)
        if gamma.shape != (self.n_gamma,):
            raise ValueError(f"gamma must have length {self.n_gamma}, got {gamma.shape}")
        return gamma.reshape(self.N_p, self.gamma_step)


StageCost = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MpcProblem:
    """Finite-horizon problem data.

    ``stage_cost(gamma_l)`` returns linear coefficients over one step's
    ``[u_c, z, u_d, delta]``. ``exo_rhs`` (``q x gamma_step``) adds
    ``exo_rhs @ gamma_l`` to the right-hand side of the MLD rows at step ``l``.
    ``state_cost`` prices ``x(k+l)`` for ``l < N_p`` and ``terminal_cost`` prices
    ``x(k+N_p)``; both default to zero.
    """

    system: MldSystem
    layout: HorizonLayout
    stage_cost: StageCost
    exo_rhs: np.ndarray | None = None
    state_cost: np.ndarray | None = None
    terminal_cost: np.ndarray | None = None

    def __post_init__(self):
        report = validate(self.system)
        if not report.ok:
            raise ValueError(f"invalid MLD system: {report}")
        d, L = self.system.dims, self.layout
        if (d.m_c, d.r_c, d.m_d, d.r_d) != (L.m_c, L.r_c, L.m_d, L.r_d):
            raise ValueError("layout does not match the system dimensions")
        if self.exo_rhs is not None:
            W = np.asarray(self.exo_rhs, dtype=float)
            if W.shape != (self.system.q, L.gamma_step):
                raise ValueError(f"exo_rhs must have shape {(self.system.q, L.gamma_step)}, got {W.shape}")
            object.__setattr__(self, "exo_rhs", W)
        for name in ("state_cost", "terminal_cost"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != (d.n,):
                    raise ValueError(f"{name} must have length {d.n}")
                object.__setattr__(self, name, v)

    def stage_coefficients(self, gamma_l) -> np.ndarray:
        coef = np.asarray(self.stage_cost(np.asarray(gamma_l, dtype=float)), dtype=float)
        width = self.layout.n_cont_step + self.layout.n_disc_step
        if coef.shape != (width,):
            raise ValueError(f"stage cost must return {width} coefficients, got shape {coef.shape}")
        return coef


@dataclass(frozen=True)
class ParametricMilp:
    """``min c^T eps + c0(x)  s.t.  G eps <= w + S x``, for one fixed ``gamma``."""

    c: np.ndarray
    G: np.ndarray
    w: np.ndarray
    S: np.ndarray
    cost_x: np.ndarray  # objective constant is cost_x @ x + cost_const
    cost_const: float
    binary_index_set: tuple[int, ...]
    # x(k+l) = Phi[l] x + Gam[l] eps + const[l], l = 0..N_p
    Phi: np.ndarray
    Gam: np.ndarray
    const: np.ndarray

    def at(self, x) -> CompactMilp:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        n_eps = self.c.shape[0]
        lo = np.full(n_eps, -np.inf)
        hi = np.full(n_eps, np.inf)
        b = list(self.binary_index_set)
        lo[b], hi[b] = 0.0, 1.0
        lp = LinearProgram(self.c, self.G, self.w + self.S @ x, lo=lo, hi=hi,
                           offset=float(self.cost_x @ x + self.cost_const))
        return CompactMilp(lp, self.binary_index_set)


def _check_chi(p: MpcProblem, chi: AugmentedState) -> np.ndarray:
    if chi.x.shape != (p.system.dims.n,):
        raise ValueError(f"state must have length {p.system.dims.n}, got {chi.x.shape}")
    return p.layout.unpack_gamma(chi.gamma)


def compile_parametric(p: MpcProblem, gamma) -> ParametricMilp:
    """Stack the horizon into the parametric form with the state left symbolic."""
    sys_, L = p.system, p.layout
    d = sys_.dims
    n, q, N = d.n, sys_.q, L.N_p
    gamma_rows = L.unpack_gamma(gamma)
    n_eps = L.n_eps

    Phi = np.zeros((N + 1, n, n))
    Gam = np.zeros((N + 1, n, n_eps))
    const = np.zeros((N + 1, n))
    Phi[0] = np.eye(n)
    G = np.zeros((N * q, n_eps))
    w = np.zeros(N * q)
    S = np.zeros((N * q, n))
    c = np.zeros(n_eps)
    cost_x = np.zeros(n)
    cost_const = 0.0
    E1c, E1d = sys_.E1[:, :d.m_c], sys_.E1[:, d.m_c:]
    B1c, B1d = sys_.B1[:, :d.m_c], sys_.B1[:, d.m_c:]

    for l in range(N):
        idx = L.step_indices(l)
        rows = slice(l * q, (l + 1) * q)
        # E2 delta + E3 z - E1 u - E4 x(l) <= E5 + W gamma_l
        blk = np.zeros((q, n_eps))
        blk[:, idx["u_c"]] = -E1c
        blk[:, idx["z"]] = sys_.E3
        blk[:, idx["u_d"]] = -E1d
        blk[:, idx["delta"]] = sys_.E2
        G[rows] = blk - sys_.E4 @ Gam[l]
        w[rows] = sys_.E5 + sys_.E4 @ const[l]
        if p.exo_rhs is not None:
            w[rows] += p.exo_rhs @ gamma_rows[l]
        S[rows] = sys_.E4 @ Phi[l]

        coef = p.stage_coefficients(gamma_rows[l])
        c[L.cont_slice(l)] += coef[:L.n_cont_step]
        c[L.disc_slice(l)] += coef[L.n_cont_step:]
        if p.state_cost is not None:
            c += Gam[l].T @ p.state_cost
            cost_x += Phi[l].T @ p.state_cost
            cost_const += float(p.state_cost @ const[l])

        inc = np.zeros((n, n_eps))
        inc[:, idx["u_c"]] = B1c
        inc[:, idx["u_d"]] = B1d
        inc[:, idx["delta"]] = sys_.B2
        inc[:, idx["z"]] = sys_.B3
        Phi[l + 1] = sys_.A @ Phi[l]
        Gam[l + 1] = sys_.A @ Gam[l] + inc
        const[l + 1] = sys_.A @ const[l] + sys_.B5

    if p.terminal_cost is not None:
        c += Gam[N].T @ p.terminal_cost
        cost_x += Phi[N].T @ p.terminal_cost
        cost_const += float(p.terminal_cost @ const[N])
    binaries = tuple(range(L.n_cont, n_eps))
    return ParametricMilp(c, G, w, S, cost_x, cost_const, binaries, Phi, Gam, const)


def build_milp(p: MpcProblem, chi: AugmentedState) -> CompactMilp:
    """The compact MILP at augmented state ``chi``; binaries carry [0, 1] bounds."""
    _check_chi(p, chi)
    return compile_parametric(p, chi.gamma).at(chi.x)


def predicted_states(p: MpcProblem, chi: AugmentedState, eps) -> np.ndarray:
    """State trajectory ``x(k), ..., x(k+N_p)`` implied by ``eps`` (shape ``(N_p+1, n)``)."""
    pm = compile_parametric(p, chi.gamma)
    eps = np.asarray(eps, dtype=float)
    return np.einsum("lij,j->li", pm.Phi, chi.x) + np.einsum("lij,j->li", pm.Gam, eps) + pm.const


def fix_discrete(p: MpcProblem, chi: AugmentedState, eps_d) -> LinearProgram:
    """The LP left after fixing the whole discrete sequence ``eps_d``."""
    eps_d = np.atleast_1d(np.asarray(eps_d, dtype=float))
    if eps_d.shape != (p.layout.n_disc,):
        raise ValueError(f"eps_d must have length {p.layout.n_disc}, got {eps_d.shape}")
    return fix_binaries(build_milp(p, chi), eps_d)


class FirstInput(NamedTuple):
    u_c: np.ndarray
    z: np.ndarray
    u_d: np.ndarray
    delta: np.ndarray


def extract_first_input(primal, layout: HorizonLayout) -> FirstInput:
    """The ``l = 0`` slice of a full decision vector, as ``(u_c, z, u_d, delta)``."""
    u_c, z, u_d, delta = layout.unpack(primal)
    return FirstInput(u_c[0].copy(), z[0].copy(), u_d[0].copy(), delta[0].copy())


def first_step_cost(p: MpcProblem, x, gamma, first: FirstInput) -> float:
    gamma_rows = p.layout.unpack_gamma(gamma)
    coef = p.stage_coefficients(gamma_rows[0])
    vec = np.concatenate([first.u_c, first.z, first.u_d, first.delta])
    cost = float(coef @ vec)
    if p.state_cost is not None:
        cost += float(p.state_cost @ np.asarray(x, dtype=float))
    return cost


@dataclass
class StepRecord:
    k: int
    x: np.ndarray
    gamma0: np.ndarray
    first: FirstInput | None
    stage_cost: float
    status: str
    fallback: bool
    wall_time: float
    objective: float | None = None


@dataclass
class Trajectory:
    layout: HorizonLayout
    state_names: tuple[str, ...]
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def fallback_count(self) -> int:
        return sum(s.fallback for s in self.steps)

    @property
    def total_cost(self) -> float:
        return float(sum(s.stage_cost for s in self.steps))

    def rows(self) -> list[dict]:
        L = self.layout
        out = []
        for s in self.steps:
            row = {"k": s.k}
            row.update({name: float(v) for name, v in zip(self.state_names, s.x)})
            row.update({name: float(v) for name, v in zip(L.gamma_names, s.gamma0)})
            vals = (np.concatenate(s.first) if s.first is not None
                    else np.full(len(L.step_names), np.nan))
            row.update({name: float(v) for name, v in zip(L.step_names, vals)})
            row.update(stage_cost=s.stage_cost, status=s.status, fallback=int(s.fallback),
                       wall_time=s.wall_time)
            out.append(row)
        return out

    def to_csv(self, path: str | Path) -> None:
        rows = self.rows()
        if not rows:
            Path(path).write_text("")
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


DiscretePolicy = Union[str, Callable[[AugmentedState], np.ndarray]]


def receding_horizon_run(
    p: MpcProblem,
    x0,
    gamma_source: Callable[[int], np.ndarray],
    k0: int,
    steps: int,
    discrete_policy: DiscretePolicy = "exact",
    bnb: BnbConfig | None = None,
    state_names: tuple[str, ...] = (),
) -> Trajectory:
    """Closed-loop simulation applying the first input of each horizon solution.

    ``discrete_policy`` is ``"exact"`` (solve the MILP) or a callback mapping the
    augmented state to a full binary sequence. When the LP left by a callback
    is not solvable the step falls back to the exact MILP and is flagged.
    """
    n = p.system.dims.n
    state_names = tuple(state_names) or tuple(f"x{i}" for i in range(n))
    traj = Trajectory(p.layout, state_names)
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    for i in range(steps):
        k = k0 + i
        gamma = np.asarray(gamma_source(k), dtype=float)
        chi = AugmentedState(x, gamma, k)
        gamma0 = p.layout.unpack_gamma(gamma)[0]
        t0 = time.perf_counter()
        milp = build_milp(p, chi)
        primal, status, fallback, objective = None, "", False, None
        if discrete_policy == "exact":
            sol = solve_milp(milp, bnb)
            status = sol.status.value
            if sol.status is MilpStatus.OPTIMAL:
                primal, objective = sol.primal, sol.objective
        else:
            eps_d = np.asarray(discrete_policy(chi), dtype=float)
            lp_sol = solve_lp(fix_binaries(milp, eps_d))
            status = lp_sol.status.value
            if lp_sol.status is LpStatus.OPTIMAL:
                primal = np.zeros(p.layout.n_eps)
                primal[: p.layout.n_cont] = lp_sol.primal
                primal[p.layout.n_cont:] = eps_d
                objective = lp_sol.objective
            else:
                fallback = True
                sol = solve_milp(milp, bnb)
                if sol.status is MilpStatus.OPTIMAL:
                    primal, objective = sol.primal, sol.objective
        wall = time.perf_counter() - t0
        if primal is None:
            # nothing applicable: hold the state and record the failure
            traj.steps.append(StepRecord(k, x.copy(), gamma0, None, float("nan"), status or "Failed",
                                         fallback, wall))
            continue
        first = extract_first_input(primal, p.layout)
        # binaries come out of the LP within tolerance of {0, 1}
        first = FirstInput(first.u_c, first.z, np.round(first.u_d), np.round(first.delta))
        cost = first_step_cost(p, x, gamma, first)
        traj.steps.append(StepRecord(k, x.copy(), gamma0, first, cost, status, fallback, wall, objective))
        u = np.concatenate([first.u_c, first.u_d])
        x = step(p.system, x, MldStep(u, first.delta, first.z))
    return traj
