"""Supervised baseline: imitate branch-and-bound binaries with the same recurrent network.

Labels are the per-step sub-action indices of the exact MILP optimum. The
classifier is trained with per-step cross-entropy and teacher forcing, then
decoded greedily exactly like the reinforcement-learning policy.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .agent import (FEATURE_SETS, FeatureScaler, MicrogridEnv, autoregressive, base_features, decoupled_q_rollout,
                    feature_size, greedy, set_previous)
from .microgrid import MicrogridParams, build_mpc_problem
from .milp import BnbConfig, MilpStatus, solve_milp
from .mld import AugmentedState
from .mpc import build_milp
from .neural import Adam, QNetwork, backward, forward_unrolled, softmax

DATASET_FORMAT = "mldrl-sl-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class LabeledSample:
    chi: AugmentedState
    optimal_eps_d: np.ndarray  # sub-action index per horizon step

    def to_dict(self) -> dict:
        return {"chi": self.chi.to_dict(), "label": [int(v) for v in self.optimal_eps_d]}

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledSample":
        return cls(AugmentedState.from_dict(d["chi"]), np.asarray(d["label"], dtype=int))


@dataclass
class Dataset:
    N_p: int
    params: MicrogridParams
    samples: list[LabeledSample]
    skipped: list[dict] = field(default_factory=list)
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.optimal_eps_d for s in self.samples], dtype=int).reshape(len(self.samples), self.N_p)

    def save(self, path: str | Path) -> None:
        doc = {
            "format": DATASET_FORMAT, "version": DATASET_VERSION, "N_p": self.N_p, "seed": self.seed,
            "params": asdict(self.params), "samples": [s.to_dict() for s in self.samples], "skipped": self.skipped,
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read dataset {path}: {exc}") from None
        if doc.get("format") != DATASET_FORMAT or doc.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: not a version {DATASET_VERSION} {DATASET_FORMAT} file")
        params = MicrogridParams.from_dict(doc["params"])
        samples = [LabeledSample.from_dict(s) for s in doc["samples"]]
        n_actions = 2 ** (params.N_gen + 2)
        for i, s in enumerate(samples):
            if s.optimal_eps_d.shape != (doc["N_p"],) or np.any(s.optimal_eps_d < 0) or np.any(s.optimal_eps_d >= n_actions):
                raise ValueError(f"{path}: sample {i} has an invalid label")
        return cls(int(doc["N_p"]), params, samples, doc.get("skipped", []), doc.get("seed"))


def generate_dataset(env: MicrogridEnv, n_data: int, seed: int, bnb: BnbConfig | None = None,
                     progress: Callable[[int, int], None] | None = None) -> Dataset:
    """Solve ``n_data`` random states to optimality and keep the binary part as labels.

    States are drawn like the agent's initial states, with replacement. Instances
    whose MILP is infeasible or stops at the node limit are skipped and listed.
    """
    rng = np.random.default_rng(seed)
    # ordered identical units: same optimum, far smaller tree, labels come out canonical
    problem = build_mpc_problem(env.params, env.N_p, order_units=True)
    samples: list[LabeledSample] = []
    skipped: list[dict] = []
    for i in range(n_data):
        chi = env.sample_initial(rng)
        m = build_milp(problem, chi)
        sol = solve_milp(m, bnb)
        if sol.status is not MilpStatus.OPTIMAL:
            skipped.append({"draw": i, "k": chi.k, "x_b": float(chi.x[0]), "status": sol.status.value})
            continue
        eps_d = np.round(sol.primal[list(m.binary_index_set)])
        samples.append(LabeledSample(chi, env.space.from_eps_d(eps_d)))
        if progress is not None:
            progress(i, len(samples))
    return Dataset(env.N_p, env.params, samples, skipped, seed)


@dataclass(frozen=True)
class SlConfig:
    hidden: int = 64
    lr: float = 3e-3
    epochs: int = 60
    batch_size: int = 32
    clip_norm: float = 1.0
    holdout: float = 0.2
    seed: int = 0
    feature_set: str = "step"

    def __post_init__(self):
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"feature_set must be one of {FEATURE_SETS}")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs, batch_size and hidden must be positive")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must lie in [0, 1)")


@dataclass
class SlEpoch:
    epoch: int
    loss: float
    train_accuracy: float
    holdout_accuracy: float | None


@dataclass
class SlResult:
    net: QNetwork
    scaler: FeatureScaler
    log: list[SlEpoch]
    train_index: np.ndarray
    holdout_index: np.ndarray

    @property
    def holdout_accuracy(self) -> float | None:
        return self.log[-1].holdout_accuracy if self.log else None


def cross_entropy_and_grads(net: QNetwork, features: np.ndarray, labels: np.ndarray):
    """Mean per-step cross-entropy of softmax(logits) against one-hot labels, with teacher forcing."""
    B, N_p = labels.shape
    logits, trace = forward_unrolled(net, set_previous(features, labels))
    p = softmax(logits)
    bi, li = np.meshgrid(np.arange(B), np.arange(N_p), indexing="ij")
    loss = float(-np.mean(np.log(np.maximum(p[bi, li, labels], 1e-300))))
    dq = p.copy()
    dq[bi, li, labels] -= 1.0
    dq /= B * N_p
    return loss, backward(net, trace, dq)


def predict_batch(net: QNetwork, features: np.ndarray) -> np.ndarray:
    """Free-running greedy decode for a batch of base features."""
    actions, _ = autoregressive(net, features, lambda l, q: greedy(q))
    return actions


def predict(net: QNetwork, scaler: FeatureScaler, chi: AugmentedState, N_p: int) -> np.ndarray:
    return decoupled_q_rollout(net, scaler, chi, N_p, "greedy")[0]


def per_step_accuracy(net: QNetwork, features: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict_batch(net, features) == labels))


def split_indices(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(holdout * n))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def train_sl(dataset: Dataset, scaler: FeatureScaler, cfg: SlConfig,
             progress: Callable[[SlEpoch], None] | None = None) -> SlResult:
    if len(dataset) == 0:
        raise ValueError("the dataset is empty")
    if scaler.feature_set != cfg.feature_set:
        raise ValueError(f"scaler uses the {scaler.feature_set!r} feature set, config asks for {cfg.feature_set!r}")
    rng = np.random.default_rng(cfg.seed)
    n_actions = 2 ** (dataset.params.N_gen + 2)
    N_p = dataset.N_p
    net = QNetwork.init(feature_size(n_actions, N_p, scaler.feature_set), cfg.hidden, n_actions, rng)
    params = net.params()
    opt = Adam(lr=cfg.lr, clip_norm=cfg.clip_norm)
    feats = base_features(scaler, [s.chi for s in dataset.samples], N_p, n_actions)
    labels = dataset.labels()
    train_idx, hold_idx = split_indices(len(dataset), cfg.holdout, cfg.seed)
    if train_idx.size == 0:
        raise ValueError("holdout leaves no training samples")
    log: list[SlEpoch] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grads = cross_entropy_and_grads(net, feats[b], labels[b])
            opt.step(params, grads)
            losses.append(loss)
        entry = SlEpoch(
            epoch, float(np.mean(losses)),
            per_step_accuracy(net, feats[train_idx], labels[train_idx]),
            per_step_accuracy(net, feats[hold_idx], labels[hold_idx]) if hold_idx.size else None,
        )
        log.append(entry)
        if progress is not None:
            progress(entry)
    return SlResult(net, scaler, log, train_idx, hold_idx)
