"""Mixed-logical dynamical (MLD) systems.

An MLD system couples affine dynamics

    x(k+1) = A x + B1 u + B2 delta + B3 z + B5

with the mixed-integer inequality block

    E2 delta + E3 z <= E1 u + E4 x + E5

where ``u = [u_c, u_d]`` and ``x = [x_c, x_d]`` carry continuous coordinates first
and binary coordinates second, ``delta`` is binary and ``z`` is real.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MATRIX_FIELDS = ("A", "B1", "B2", "B3", "B5", "E1", "E2", "E3", "E4", "E5")


@dataclass(frozen=True)
class MldDims:
    n_c: int
    n_d: int
    m_c: int
    m_d: int
    r_c: int
    r_d: int

    def __post_init__(self):
        for name in ("n_c", "n_d", "m_c", "m_d", "r_c", "r_d"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {value!r}")
        if self.n_c + self.n_d < 1:
            raise ValueError("an MLD system needs at least one state")

    @property
    def n(self) -> int:
        return self.n_c + self.n_d

    @property
    def m(self) -> int:
        return self.m_c + self.m_d


@dataclass(frozen=True)
class MldSystem:
    """Immutable container for the matrices of an MLD system.

    Arrays are copied and made read-only on construction. Shapes are not checked
    here so that malformed systems can still be passed to :func:`validate`.
    """

    dims: MldDims
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    B3: np.ndarray
    B5: np.ndarray
    E1: np.ndarray
    E2: np.ndarray
    E3: np.ndarray
    E4: np.ndarray
    E5: np.ndarray

    def __post_init__(self):
        for name in MATRIX_FIELDS:
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def q(self) -> int:
        return int(self.E5.shape[0]) if self.E5.ndim == 1 else 0

    def to_dict(self) -> dict:
        out = {"dims": {k: getattr(self.dims, k) for k in ("n_c", "n_d", "m_c", "m_d", "r_c", "r_d")}}
        for name in MATRIX_FIELDS:
            out[name] = getattr(self, name).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MldSystem":
        missing = [k for k in ("dims",) + MATRIX_FIELDS if k not in data]
        if missing:
            raise ValueError(f"MLD document is missing fields: {', '.join(missing)}")
        dims = MldDims(**data["dims"])
        n, m, q = dims.n, dims.m, len(data["E5"])
        shapes = {
            "A": (n, n), "B1": (n, m), "B2": (n, dims.r_d), "B3": (n, dims.r_c),
            "E1": (q, m), "E2": (q, dims.r_d), "E3": (q, dims.r_c), "E4": (q, n),
        }
        mats = {}
        for name in MATRIX_FIELDS:
            arr = np.array(data[name], dtype=float)
            # empty blocks serialize as [] or [[], ...]; restore their 2-D shape
            if name in shapes and arr.size == 0:
                arr = arr.reshape(shapes[name])
            mats[name] = arr
        return cls(dims=dims, **mats)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "MldSystem":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class MldStep:
    """One step of inputs: ``u`` (continuous then binary), ``delta`` and ``z``."""

    u: np.ndarray
    delta: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        for name in ("u", "delta", "z"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))


@dataclass(frozen=True)
class AugmentedState:
    """Physical state plus the exogenous forecast window for the current horizon."""

    x: np.ndarray
    gamma: np.ndarray
    k: int = -1  # time index into the data source, -1 when unknown

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float).ravel())

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "gamma": self.gamma.tolist(), "k": int(self.k)}

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentedState":
        return cls(x=data["x"], gamma=data["gamma"], k=data.get("k", -1))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "OK" if self.ok else "; ".join(self.violations)


def validate(system: MldSystem) -> ValidationReport:
    """Check shapes against ``dims`` and finiteness of every entry."""
    report = ValidationReport()
    d = system.dims
    n, m = d.n, d.m
    if system.E5.ndim != 1:
        report.violations.append(f"E5: expected a vector, got shape {system.E5.shape}")
        q = None
    else:
        q = system.E5.shape[0]
    expected = {
        "A": (n, n), "B1": (n, m), "B2": (n, d.r_d), "B3": (n, d.r_c), "B5": (n,),
        "E1": (q, m), "E2": (q, d.r_d), "E3": (q, d.r_c), "E4": (q, n),
    }
    for name, shape in expected.items():
        actual = getattr(system, name).shape
        if q is None and name.startswith("E"):
            ok = len(actual) == 2 and actual[1] == shape[1]
        else:
            ok = actual == shape
        if not ok:
            report.violations.append(f"{name}: expected shape {shape}, got {actual}")
    for name in MATRIX_FIELDS:
        arr = getattr(system, name)
        if not np.all(np.isfinite(arr)):
            bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
            report.violations.append(f"{name}: {bad} non-finite entr{'y' if bad == 1 else 'ies'}")
    return report


def _check_binary(name: str, values: np.ndarray) -> None:
    if values.size and not np.all((values == 0.0) | (values == 1.0)):
        raise ValueError(f"{name} must be exactly 0 or 1, got {values.tolist()}")


def _check_step_dims(system: MldSystem, x: np.ndarray, s: MldStep) -> None:
    d = system.dims
    for name, vec, size in (("x", x, d.n), ("u", s.u, d.m), ("delta", s.delta, d.r_d), ("z", s.z, d.r_c)):
        if vec.shape != (size,):
            raise ValueError(f"{name}: expected length {size}, got shape {vec.shape}")
    _check_binary("u_d", s.u[d.m_c:])
    _check_binary("delta", s.delta)


def step(system: MldSystem, x, s: MldStep) -> np.ndarray:
    """Next state ``A x + B1 u + B2 delta + B3 z + B5``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_step_dims(system, x, s)
    return system.A @ x + system.B1 @ s.u + system.B2 @ s.delta + system.B3 @ s.z + system.B5


def constraint_residual(system: MldSystem, x, s: MldStep, rhs_shift=None) -> np.ndarray:
    """Row residuals ``E2 d + E3 z - E1 u - E4 x - E5 - rhs_shift`` (feasible when <= 0)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_step_dims(system, x, s)
    res = system.E2 @ s.delta + system.E3 @ s.z - system.E1 @ s.u - system.E4 @ x - system.E5
    if rhs_shift is not None:
        res = res - np.asarray(rhs_shift, dtype=float)
    return res


def check_constraints(system: MldSystem, x, s: MldStep, tol: float = 1e-6, rhs_shift=None) -> tuple[bool, float]:
    """Return ``(feasible, worst_residual)`` for the inequality block.

    ``rhs_shift`` adds an exogenous term to ``E5`` (the ``w(gamma)`` part of a
    parametrized problem); it defaults to zero.
    """
    res = constraint_residual(system, x, s, rhs_shift)
    worst = float(res.max()) if res.size else 0.0
    return bool(worst <= tol), worst
