"""Exogenous profiles: CSV ingestion, downscaling, synthetic prices and demand.

A profile set holds the five series the microgrid consumes, aligned on one time
grid, and cuts forecast windows from them in the packing order
``[c_buy, c_sell, c_prod, P_res, P_load]``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

KINDS = ("load", "res", "price_buy", "price_sell", "price_prod")
# kinds in the per-step packing order of the forecast window
GAMMA_KINDS = ("price_buy", "price_sell", "price_prod", "res", "load")
POWER_KINDS = ("load", "res")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ProfileSeries:
    kind: str
    start: datetime
    step: timedelta
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProfileError(f"unknown profile kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.step <= timedelta(0):
            raise ProfileError("time step must be positive")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ProfileError("values must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise ProfileError(f"{self.kind}: series contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def timestamps(self) -> list[datetime]:
        return [self.start + i * self.step for i in range(len(self))]

    def with_values(self, values) -> "ProfileSeries":
        return ProfileSeries(self.kind, self.start, self.step, np.asarray(values, dtype=float))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "value"])
            for ts, v in zip(self.timestamps(), self.values):
                writer.writerow([ts.isoformat(), repr(float(v))])


def load_csv(path: str | Path, kind: str) -> ProfileSeries:
    """Read a ``timestamp,value`` file with ISO-8601 timestamps and uniform spacing.

    A header row is accepted when its value column is not numeric.
    """
    stamps: list[datetime] = []
    values: list[float] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise ProfileError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            ts_raw, val_raw = (cell.strip() for cell in row)
            if lineno == 1 and not stamps:
                try:
                    float(val_raw)
                except ValueError:
                    continue  # header
            if not val_raw:
                raise ProfileError(f"{path}:{lineno}: empty value")
            try:
                ts = datetime.fromisoformat(ts_raw)
            except ValueError:
                raise ProfileError(f"{path}:{lineno}: bad timestamp {ts_raw!r}") from None
            try:
                val = float(val_raw)
            except ValueError:
                raise ProfileError(f"{path}:{lineno}: bad value {val_raw!r}") from None
            if not np.isfinite(val):
                raise ProfileError(f"{path}:{lineno}: non-finite value {val_raw!r}")
            if len(stamps) >= 2 and ts - stamps[-1] != stamps[1] - stamps[0]:
                raise ProfileError(
                    f"{path}:{lineno}: non-uniform spacing ({ts - stamps[-1]} after {stamps[1] - stamps[0]})")
            if stamps and ts <= stamps[-1]:
                raise ProfileError(f"{path}:{lineno}: timestamps must increase")
            stamps.append(ts)
            values.append(val)
    if not stamps:
        raise ProfileError(f"{path}: no data rows")
    step = stamps[1] - stamps[0] if len(stamps) > 1 else timedelta(minutes=30)
    return ProfileSeries(kind, stamps[0], step, np.array(values))


def downscale(series: ProfileSeries, peak_target: float) -> ProfileSeries:
    """Scale linearly so the maximum equals ``peak_target``."""
    peak = float(series.values.max(initial=0.0))
    if peak <= 0.0:
        raise ProfileError(f"{series.kind}: cannot downscale a series without positive values")
    if peak == peak_target:
        return series
    return series.with_values(series.values * (peak_target / peak))


@dataclass(frozen=True)
class PriceModel:
    """Normal price draws with per-bucket means and standard deviations.

    ``bucket_hours`` holds the start hour of each time-of-day bucket.
    """

    bucket_hours: tuple[int, ...] = (0, 6, 12, 18)
    buy_mean: tuple[float, ...] = (0.22, 0.32, 0.30, 0.36)
    buy_std: tuple[float, ...] = (0.04, 0.04, 0.04, 0.04)
    sell_mean: tuple[float, ...] = (0.08, 0.12, 0.11, 0.14)
    sell_std: tuple[float, ...] = (0.03, 0.03, 0.03, 0.03)
    prod_mean: tuple[float, ...] = (0.15, 0.20, 0.19, 0.22)
    prod_std: tuple[float, ...] = (0.04, 0.04, 0.04, 0.04)
    seed: int = 0

    def __post_init__(self):
        n = len(self.bucket_hours)
        for f in ("bucket_hours", "buy_mean", "buy_std", "sell_mean", "sell_std", "prod_mean", "prod_std"):
            vals = tuple(getattr(self, f))
            if len(vals) != n:
                raise ValueError(f"{f} needs {n} entries, got {len(vals)}")
            object.__setattr__(self, f, vals)
        hours = self.bucket_hours
        if n == 0 or hours[0] != 0 or list(hours) != sorted(set(hours)) or hours[-1] >= 24:
            raise ValueError("bucket_hours must start at 0, increase strictly and stay below 24")
        if min(self.buy_std + self.sell_std + self.prod_std) < 0:
            raise ValueError("standard deviations must be nonnegative")
        if not np.mean(self.sell_mean) < np.mean(self.prod_mean) < np.mean(self.buy_mean):
            raise ValueError("need mean(c_sell) < mean(c_prod) < mean(c_buy)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "PriceModel":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown price model field: {unknown[0]}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    def bucket_of(self, hours: np.ndarray) -> np.ndarray:
        return np.searchsorted(np.asarray(self.bucket_hours), hours, side="right") - 1


def _hours(start: datetime, step: timedelta, length: int) -> np.ndarray:
    offset = start.hour + start.minute / 60 + start.second / 3600
    return (offset + np.arange(length) * (step.total_seconds() / 3600)) % 24


def synthesize_prices(model: PriceModel, length: int, start: datetime = datetime(2022, 1, 1),
                      step: timedelta = timedelta(minutes=30)) -> dict[str, ProfileSeries]:
    """Seeded normal price draws for buying, selling and production."""
    rng = np.random.default_rng(model.seed)
    bucket = model.bucket_of(_hours(start, step, length))
    out = {}
    for kind, mean, std in (("price_buy", model.buy_mean, model.buy_std),
                            ("price_sell", model.sell_mean, model.sell_std),
                            ("price_prod", model.prod_mean, model.prod_std)):
        mu = np.asarray(mean)[bucket]
        sd = np.asarray(std)[bucket]
        out[kind] = ProfileSeries(kind, start, step, mu + sd * rng.standard_normal(length))
    return out


def _ar1(rng: np.random.Generator, length: int, phi: float, sigma: float) -> np.ndarray:
    noise = rng.standard_normal(length) * sigma
    out = np.empty(length)
    acc = 0.0
    for i in range(length):
        acc = phi * acc + noise[i]
        out[i] = acc
    return out


def synthesize_load_res(seed: int, length: int, start: datetime = datetime(2022, 1, 1),
                        step: timedelta = timedelta(minutes=30), peak_load: float = 400.0,
                        peak_res: float = 250.0) -> tuple[ProfileSeries, ProfileSeries]:
    """Daily-pattern demand and renewable generation with seeded noise."""
    rng = np.random.default_rng(seed)
    hours = _hours(start, step, length)
    steps_per_day = max(1, int(round(timedelta(days=1) / step)))
    t_days = np.arange(length) / steps_per_day
    day_of_year = (start.timetuple().tm_yday - 1 + t_days) % 365.0
    weekday = (start.weekday() + np.floor(t_days).astype(int)) % 7

    seasonal = 1.0 + 0.12 * np.cos(2 * np.pi * day_of_year / 365.0)
    daily = 0.55 + 0.25 * np.exp(-((hours - 8.0) ** 2) / 4.0) + 0.40 * np.exp(-((hours - 19.0) ** 2) / 6.0)
    weekly = np.where(weekday >= 5, 0.88, 1.0)
    load = daily * seasonal * weekly * (1.0 + _ar1(rng, length, 0.9, 0.03))
    load = np.maximum(load, 0.05)

    sun = np.clip(np.sin(np.pi * (hours - 6.0) / 12.0), 0.0, None)
    summer = 0.55 + 0.45 * np.cos(2 * np.pi * (day_of_year - 172) / 365.0)
    n_days = int(np.ceil(length / steps_per_day)) + 1
    cloud = rng.uniform(0.3, 1.0, n_days)[np.floor(t_days).astype(int)]
    wind = np.clip(0.25 + _ar1(rng, length, 0.97, 0.04), 0.0, None)
    res = 0.75 * sun * summer * cloud + wind

    load_s = downscale(ProfileSeries("load", start, step, load), peak_load)
    res_s = downscale(ProfileSeries("res", start, step, res), peak_res)
    return load_s, res_s


@dataclass(frozen=True)
class ProfileSet:
    """The five aligned series one microgrid run consumes."""

    series: dict[str, ProfileSeries] = field(default_factory=dict)

    def __post_init__(self):
        missing = [k for k in KINDS if k not in self.series]
        if missing:
            raise ProfileError(f"profile set is missing: {', '.join(missing)}")
        ref = self.series["load"]
        for kind in KINDS:
            s = self.series[kind]
            if s.kind != kind:
                raise ProfileError(f"series stored under {kind!r} has kind {s.kind!r}")
            if (s.start, s.step, len(s)) != (ref.start, ref.step, len(ref)):
                raise ProfileError(f"{kind}: series is not aligned with load (start, step and length must match)")
            if kind in POWER_KINDS and np.any(s.values < 0):
                raise ProfileError(f"{kind}: power values must be nonnegative")
        stacked = np.column_stack([self.series[k].values for k in GAMMA_KINDS])
        stacked.setflags(write=False)
        object.__setattr__(self, "_rows", stacked)

    def __len__(self) -> int:
        return len(self.series["load"])

    @property
    def start(self) -> datetime:
        return self.series["load"].start

    @property
    def step(self) -> timedelta:
        return self.series["load"].step

    def rows(self) -> np.ndarray:
        """All time steps as ``(length, 5)`` in packing order."""
        return self._rows

    def gamma_rows(self, k: int, N_p: int) -> np.ndarray:
        if k < 0 or k + N_p > len(self):
            raise IndexError(f"window [{k}, {k + N_p}) outside profile of length {len(self)}")
        return self._rows[k:k + N_p]

    def window(self, k: int, N_p: int) -> np.ndarray:
        return self.gamma_rows(k, N_p).ravel().copy()

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for kind in KINDS:
            self.series[kind].to_csv(d / f"{kind}.csv")

    @classmethod
    def load(cls, directory: str | Path) -> "ProfileSet":
        d = Path(directory)
        return cls({kind: load_csv(d / f"{kind}.csv", kind) for kind in KINDS})


def window(profiles: ProfileSet, k: int, N_p: int) -> np.ndarray:
    """Forecast window starting at ``k``, packed per step as ``[c_buy, c_sell, c_prod, P_res, P_load]``."""
    return profiles.window(k, N_p)


def synthesize_set(seed: int, start: datetime, days: int, step: timedelta = timedelta(minutes=30),
                   prices: PriceModel | None = None, peak_load: float = 400.0,
                   peak_res: float = 250.0) -> ProfileSet:
    length = int(round(timedelta(days=days) / step))
    load, res = synthesize_load_res(seed, length, start, step, peak_load, peak_res)
    base = prices or PriceModel()
    model = PriceModel.from_dict({**base.to_dict(), "seed": seed + 1})
    return ProfileSet({"load": load, "res": res, **synthesize_prices(model, length, start, step)})


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 1
    train_start: str = "2022-01-01T00:00:00"
    test_start: str = "2021-01-01T00:00:00"
    days: int = 365
    step_minutes: int = 30
    peak_load: float = 400.0
    peak_res: float = 250.0


def synthesize_split(cfg: SynthConfig, prices: PriceModel | None = None) -> tuple[ProfileSet, ProfileSet]:
    """Training and test periods drawn from independent seeds."""
    step = timedelta(minutes=cfg.step_minutes)
    train = synthesize_set(2 * cfg.seed, datetime.fromisoformat(cfg.train_start), cfg.days, step, prices,
                           cfg.peak_load, cfg.peak_res)
    test = synthesize_set(2 * cfg.seed + 1000003, datetime.fromisoformat(cfg.test_start), cfg.days, step, prices,
                          cfg.peak_load, cfg.peak_res)
    return train, test


def write_split(directory: str | Path, train: ProfileSet, test: ProfileSet, meta: dict | None = None) -> None:
    d = Path(directory)
    train.save(d / "train")
    test.save(d / "test")
    if meta is not None:
        (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
