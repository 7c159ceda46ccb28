"""Microgrid case study: storage, dispatchable generators, renewables, grid exchange.

Variable layout of the MLD encoding::

    x     = [x_b]
    u     = [P_b, P_grid, P_dis_1..N, delta_dis_1..N]    (continuous first)
    delta = [delta_b, delta_grid]
    z     = [z_b, z_grid]

with ``z_b = delta_b * P_b`` and ``z_grid = delta_grid * P_grid``. The per-step
exogenous vector is packed as ``[c_buy, c_sell, c_prod, P_res, P_load]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .mld import MldDims, MldSystem
from .mpc import HorizonLayout, MpcProblem

GAMMA_FIELDS = ("c_buy", "c_sell", "c_prod", "P_res", "P_load")
C_BUY, C_SELL, C_PROD, P_RES, P_LOAD = range(5)


@dataclass(frozen=True)
class MicrogridParams:
    x_b_max: float = 250.0
    x_b_min: float = 25.0
    P_grid_max: float = 1000.0
    P_grid_min: float = -1000.0
    P_b_max: float = 100.0
    P_b_min: float = -100.0
    P_dis_max: float = 100.0
    P_dis_min: float = 100.0
    eta_c: float = 0.9
    eta_d: float = 0.9
    N_gen: int = 3
    T_s: float = 0.5
    # margin that turns "P < 0" into "P <= -sign_offset" for the sign indicators
    sign_offset: float = 1e-4

    def __post_init__(self):
        errors = []
        if not self.x_b_min < self.x_b_max:
            errors.append("x_b_min must be below x_b_max")
        for name in ("eta_c", "eta_d"):
            if not 0.0 < getattr(self, name) <= 1.0:
                errors.append(f"{name} must lie in (0, 1]")
        if not self.P_b_min < 0.0 < self.P_b_max:
            errors.append("need P_b_min < 0 < P_b_max")
        if not self.P_grid_min < 0.0 < self.P_grid_max:
            errors.append("need P_grid_min < 0 < P_grid_max")
        if not 0.0 <= self.P_dis_min <= self.P_dis_max:
            errors.append("need 0 <= P_dis_min <= P_dis_max")
        if self.T_s <= 0.0:
            errors.append("T_s must be positive")
        if int(self.N_gen) != self.N_gen or self.N_gen < 1:
            errors.append("N_gen must be a positive integer")
        if self.sign_offset <= 0.0:
            errors.append("sign_offset must be positive")
        if errors:
            raise ValueError("; ".join(errors))
        object.__setattr__(self, "N_gen", int(self.N_gen))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "MicrogridParams":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown microgrid parameter: {unknown[0]}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "MicrogridParams":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def charge_gain(self) -> float:
        """Coefficient of ``z_b`` in the storage update."""
        return self.T_s * (self.eta_c - 1.0 / self.eta_d)

    @property
    def power_gain(self) -> float:
        """Coefficient of ``P_b`` in the storage update."""
        return self.T_s / self.eta_d


@dataclass(frozen=True)
class ExogenousStep:
    c_buy: float
    c_sell: float
    c_prod: float
    P_res: float
    P_load: float

    def __post_init__(self):
        if self.P_res < 0 or self.P_load < 0:
            raise ValueError("P_res and P_load must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.c_buy, self.c_sell, self.c_prod, self.P_res, self.P_load])

    @classmethod
    def from_array(cls, v) -> "ExogenousStep":
        return cls(*(float(a) for a in v))


@dataclass(frozen=True)
class MicrogridDecision:
    """One step of microgrid decisions, named as in the model description."""

    delta_b: int
    delta_grid: int
    delta_dis: tuple[int, ...]
    P_b: float
    P_grid: float
    P_dis: tuple[float, ...]
    z_b: float
    z_grid: float

    def u(self) -> np.ndarray:
        return np.array([self.P_b, self.P_grid, *self.P_dis, *self.delta_dis], dtype=float)

    def delta(self) -> np.ndarray:
        return np.array([self.delta_b, self.delta_grid], dtype=float)

    def z(self) -> np.ndarray:
        return np.array([self.z_b, self.z_grid])

    @classmethod
    def from_vectors(cls, u, delta, z) -> "MicrogridDecision":
        u = np.asarray(u, dtype=float)
        n_gen = (u.size - 2) // 2
        return cls(
            delta_b=int(round(delta[0])), delta_grid=int(round(delta[1])),
            delta_dis=tuple(int(round(v)) for v in u[2 + n_gen:]),
            P_b=float(u[0]), P_grid=float(u[1]), P_dis=tuple(float(v) for v in u[2:2 + n_gen]),
            z_b=float(z[0]), z_grid=float(z[1]),
        )


def mld_dims(params: MicrogridParams) -> MldDims:
    return MldDims(n_c=1, n_d=0, m_c=2 + params.N_gen, m_d=params.N_gen, r_c=2, r_d=2)


def row_labels(params: MicrogridParams, order_units: bool = False) -> list[str]:
    labels = []
    for dev in ("b", "grid"):
        labels += [f"{dev}_sign_lo", f"{dev}_sign_hi", f"z_{dev}_le_on", f"z_{dev}_ge_zero",
                   f"z_{dev}_le_power", f"z_{dev}_ge_power", f"P_{dev}_min", f"P_{dev}_max"]
    for i in range(params.N_gen):
        labels += [f"gen{i + 1}_max", f"gen{i + 1}_min"]
    if order_units:
        labels += [f"gen{i + 2}_after_gen{i + 1}" for i in range(params.N_gen - 1)]
    labels += ["storage_max", "storage_min", "balance_le", "balance_ge"]
    return labels


def _build_rows(params: MicrogridParams, order_units: bool = False):
    """Rows ``[x, u, delta, z] -> coeffs`` written as ``lhs <= const + W gamma``."""
    N = params.N_gen
    m = 2 + 2 * N
    # column positions in a combined row [x_b | u | delta | z]
    X, PB, PG = 0, 1, 2
    PD = [3 + i for i in range(N)]
    DD = [3 + N + i for i in range(N)]
    DB, DG = 1 + m, 2 + m
    ZB, ZG = 3 + m, 4 + m
    width = 5 + m
    rows, rhs, exo = [], [], []

    def add(coeffs: dict[int, float], const: float, w=None):
        row = np.zeros(width)
        for j, v in coeffs.items():
            row[j] += v
        rows.append(row)
        rhs.append(const)
        exo.append(np.zeros(5) if w is None else np.asarray(w, dtype=float))

    eps = params.sign_offset
    for P, D, Z, lo, hi in ((PB, DB, ZB, params.P_b_min, params.P_b_max),
                            (PG, DG, ZG, params.P_grid_min, params.P_grid_max)):
        # delta = 1 <=> P >= 0, with P <= -eps when delta = 0
        add({P: -1.0, D: -lo}, -lo)
        add({P: 1.0, D: -(hi + eps)}, -eps)
        # z = delta * P; the sign coupling makes z >= 0 and z >= P valid and tight
        add({Z: 1.0, D: -hi}, 0.0)
        add({Z: -1.0}, 0.0)
        add({Z: 1.0, P: -1.0, D: -lo}, -lo)
        add({P: 1.0, Z: -1.0}, 0.0)
        add({P: -1.0}, -lo)
        add({P: 1.0}, hi)
    for i in range(N):
        add({PD[i]: 1.0, DD[i]: -params.P_dis_max}, 0.0)
        add({PD[i]: -1.0, DD[i]: params.P_dis_min}, 0.0)
    if order_units:
        # identical units: only commit unit i+1 when unit i is on
        for i in range(N - 1):
            add({DD[i + 1]: 1.0, DD[i]: -1.0}, 0.0)
    a, b = params.charge_gain, params.power_gain
    # storage bounds apply to the level reached after the step
    add({X: 1.0, ZB: a, PB: b}, params.x_b_max)
    add({X: -1.0, ZB: -a, PB: -b}, -params.x_b_min)
    # P_b = sum P_dis + P_res + P_grid - P_load, as two inequalities
    bal = {PB: 1.0, PG: -1.0}
    for j in PD:
        bal[j] = -1.0
    w = np.zeros(5)
    w[P_RES], w[P_LOAD] = 1.0, -1.0
    add(bal, 0.0, w)
    add({k: -v for k, v in bal.items()}, 0.0, -w)
    return np.array(rows), np.array(rhs), np.array(exo), (X, slice(1, 1 + m), slice(1 + m, 3 + m), slice(3 + m, 5 + m))


def build_mld(params: MicrogridParams, order_units: bool = False) -> MldSystem:
    """MLD form of the microgrid.

    ``order_units`` adds rows forcing ``delta_dis_1 >= delta_dis_2 >= ...``. The
    units are identical, so this removes symmetric copies of every solution
    without changing the optimal cost; it is meant for exact solves only, since
    it makes otherwise valid commitment patterns infeasible.
    """
    rows, rhs, _, (X, U, D, Z) = _build_rows(params, order_units)
    N = params.N_gen
    B1 = np.zeros((1, 2 + 2 * N))
    B1[0, 0] = params.power_gain
    return MldSystem(
        dims=mld_dims(params),
        A=np.eye(1), B1=B1, B2=np.zeros((1, 2)), B3=np.array([[params.charge_gain, 0.0]]), B5=np.zeros(1),
        # E2 delta + E3 z - E1 u - E4 x <= E5
        E1=-rows[:, U], E2=rows[:, D], E3=rows[:, Z], E4=-rows[:, [X]], E5=rhs,
    )


def exogenous_rhs(params: MicrogridParams, order_units: bool = False) -> np.ndarray:
    """Matrix ``W`` (rows x 5) adding ``W @ gamma_l`` to the right-hand side at step ``l``."""
    return _build_rows(params, order_units)[2]


def continuous_cost(gamma_l, n_gen: int = 3) -> np.ndarray:
    """Cost over ``[P_b, P_grid, P_dis_1..N, z_b, z_grid]`` equal to production plus grid cost."""
    g = np.asarray(gamma_l, dtype=float)
    c_buy, c_sell, c_prod = g[C_BUY], g[C_SELL], g[C_PROD]
    return np.array([0.0, c_sell, *([c_prod] * n_gen), 0.0, c_buy - c_sell])


def stage_cost_coefficients(gamma_l, n_gen: int = 3) -> np.ndarray:
    """Coefficients over one full step ``[u_c, z, u_d, delta]`` (binaries carry no cost)."""
    return np.concatenate([continuous_cost(gamma_l, n_gen), np.zeros(n_gen + 2)])


def layout(params: MicrogridParams, N_p: int) -> HorizonLayout:
    N = params.N_gen
    return HorizonLayout.from_dims(
        mld_dims(params), N_p, gamma_step=len(GAMMA_FIELDS),
        u_c_names=("P_b", "P_grid", *(f"P_dis_{i + 1}" for i in range(N))),
        z_names=("z_b", "z_grid"),
        u_d_names=tuple(f"delta_dis_{i + 1}" for i in range(N)),
        delta_names=("delta_b", "delta_grid"),
        gamma_names=GAMMA_FIELDS,
    )


class _StageCost:
    """Picklable stage-cost callable bound to a generator count."""

    def __init__(self, n_gen: int):
        self.n_gen = n_gen

    def __call__(self, gamma_l):
        return stage_cost_coefficients(gamma_l, self.n_gen)


def build_mpc_problem(params: MicrogridParams, N_p: int, order_units: bool = False) -> MpcProblem:
    if N_p < 1:
        raise ValueError("N_p must be at least 1")
    return MpcProblem(build_mld(params, order_units), layout(params, N_p), _StageCost(params.N_gen),
                      exo_rhs=exogenous_rhs(params, order_units))


@dataclass(frozen=True)
class SubActionSpace:
    """Per-step binary combinations ordered lexicographically over
    ``(delta_grid, delta_b, delta_dis_1, ..., delta_dis_N)``; index 0 is all zeros."""

    n_gen: int

    @property
    def size(self) -> int:
        return 2 ** (self.n_gen + 2)

    @property
    def width(self) -> int:
        return self.n_gen + 2

    def bits(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.size:
            raise ValueError(f"sub-action index {index} out of range [0, {self.size})")
        return tuple((index >> (self.width - 1 - j)) & 1 for j in range(self.width))

    def index(self, bits) -> int:
        bits = [int(b) for b in bits]
        if len(bits) != self.width or any(b not in (0, 1) for b in bits):
            raise ValueError(f"expected {self.width} bits, got {bits}")
        out = 0
        for b in bits:
            out = (out << 1) | b
        return out

    def all_bits(self) -> np.ndarray:
        return np.array([self.bits(i) for i in range(self.size)], dtype=int)

    def step_binaries(self, index: int) -> np.ndarray:
        """Bits of ``index`` in layout order ``[delta_dis_1..N, delta_b, delta_grid]``."""
        g, b, *dis = self.bits(index)
        return np.array([*dis, b, g], dtype=float)

    def index_from_step(self, binaries) -> int:
        v = [int(round(x)) for x in binaries]
        return self.index([v[-1], v[-2], *v[:-2]])

    def to_eps_d(self, indices) -> np.ndarray:
        return np.concatenate([self.step_binaries(int(i)) for i in indices])

    def from_eps_d(self, eps_d) -> np.ndarray:
        eps_d = np.asarray(eps_d, dtype=float).reshape(-1, self.width)
        return np.array([self.index_from_step(row) for row in eps_d], dtype=int)

    def canonical(self, index: int) -> int:
        """Sort generator bits so that committed units come first (identical units are interchangeable)."""
        g, b, *dis = self.bits(index)
        return self.index([g, b, *sorted(dis, reverse=True)])


def sub_action_space(params: MicrogridParams) -> SubActionSpace:
    return SubActionSpace(params.N_gen)


def balance_residual(u, gamma_l) -> float:
    """``P_b - (sum P_dis + P_res + P_grid - P_load)`` for one step's ``u``."""
    u = np.asarray(u, dtype=float)
    g = np.asarray(gamma_l, dtype=float)
    n_gen = (u.size - 2) // 2
    return float(u[0] - (u[2:2 + n_gen].sum() + g[P_RES] + u[1] - g[P_LOAD]))


def storage_update(params: MicrogridParams, x_b: float, P_b: float) -> float:
    """Piecewise storage update: charging gain ``eta_c`` for ``P_b >= 0``, ``1/eta_d`` otherwise."""
    if P_b >= 0:
        return x_b + params.T_s * params.eta_c * P_b
    return x_b + params.T_s / params.eta_d * P_b


def grid_cost(c_buy: float, c_sell: float, P_grid: float) -> float:
    return c_buy * P_grid if P_grid >= 0 else c_sell * P_grid


def production_cost(c_prod: float, P_dis) -> float:
    return float(c_prod * np.sum(P_dis))
