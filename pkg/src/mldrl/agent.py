"""Decoupled Q-learning over per-step sub-actions of the microgrid MPC problem.

The agent picks one sub-action (a binary pattern for one horizon step) per
step of the prediction horizon, autoregressively: the Q-row for step ``l``
depends on the sub-actions already chosen for steps ``< l`` through the LSTM
state and a one-hot input. The environment fixes the chosen binaries, solves
the remaining LP, applies its first input and returns a scaled stage-cost
reward.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .lp import LpSolution, LpStatus, solve_lp
from .microgrid import MicrogridParams, SubActionSpace, build_mpc_problem, sub_action_space
from .mld import AugmentedState, MldStep, step as mld_step
from .mpc import FirstInput, MpcProblem, extract_first_input, first_step_cost, fix_discrete
from .neural import Adam, QNetwork, backward, forward_unrolled, lstm_step, softmax
from .profiles import ProfileSet

log = logging.getLogger(__name__)

N_GAMMA = 5
# "stage": realized first-step cost; "horizon": objective of the fixed-binary LP over the whole horizon
REWARD_BASES = ("stage", "horizon")
FEATURE_SETS = ("step", "window")


@dataclass(frozen=True)
class FeatureScaler:
    """Min/max normalization of the storage level and the exogenous values, plus the feature set.

    ``feature_set`` is ``"step"`` (each horizon step sees its own exogenous slice)
    or ``"window"`` (each step additionally sees the whole normalized window).
    """

    x_lo: float
    x_hi: float
    gamma_lo: tuple[float, ...]
    gamma_hi: tuple[float, ...]
    feature_set: str = "step"

    def __post_init__(self):
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"feature_set must be one of {FEATURE_SETS}")

    @classmethod
    def fit(cls, params: MicrogridParams, profiles: ProfileSet, feature_set: str = "step") -> "FeatureScaler":
        rows = profiles.rows()
        return cls(params.x_b_min, params.x_b_max, tuple(rows.min(axis=0).tolist()), tuple(rows.max(axis=0).tolist()),
                   feature_set)

    def to_dict(self) -> dict:
        return {"x_lo": self.x_lo, "x_hi": self.x_hi, "gamma_lo": list(self.gamma_lo), "gamma_hi": list(self.gamma_hi),
                "feature_set": self.feature_set}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(float(d["x_lo"]), float(d["x_hi"]), tuple(d["gamma_lo"]), tuple(d["gamma_hi"]),
                   d.get("feature_set", "step"))

    def scale_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_lo) / max(self.x_hi - self.x_lo, 1e-12)

    def scale_gamma(self, g: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.gamma_lo)
        span = np.maximum(np.asarray(self.gamma_hi) - lo, 1e-12)
        return (g - lo) / span


def feature_size(n_actions: int, N_p: int = 0, feature_set: str = "step") -> int:
    # storage level, one exogenous step, previous sub-action one-hot, position; optionally the whole window
    base = 1 + N_GAMMA + n_actions + 1
    return base + N_GAMMA * N_p if feature_set == "window" else base


def feature_layout(n_actions: int, N_p: int, feature_set: str = "step") -> list[str]:
    names = ["x_b", "c_buy", "c_sell", "c_prod", "P_res", "P_load",
             f"previous_sub_action_onehot[{n_actions}]", "step_fraction"]
    if feature_set == "window":
        names.append(f"window[{N_p}x{N_GAMMA}]")
    return names


def base_features(scaler: FeatureScaler, chis: Iterable[AugmentedState], N_p: int, n_actions: int) -> np.ndarray:
    """Features ``(B, N_p, D)`` with the previous-sub-action one-hot left at zero."""
    chis = list(chis)
    B = len(chis)
    D = feature_size(n_actions, N_p, scaler.feature_set)
    out = np.zeros((B, N_p, D))
    x = np.array([c.x[0] for c in chis])
    g = scaler.scale_gamma(np.array([c.gamma for c in chis]).reshape(B, N_p, N_GAMMA))
    out[:, :, 0] = scaler.scale_x(x)[:, None]
    out[:, :, 1:1 + N_GAMMA] = g
    pos = 1 + N_GAMMA + n_actions
    out[:, :, pos] = np.arange(N_p) / N_p
    if scaler.feature_set == "window":
        out[:, :, pos + 1:] = g.reshape(B, 1, -1)
    return out


def set_previous(features: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Fill the one-hot slots from chosen sub-actions ``(B, N_p)`` (teacher forcing)."""
    f = features.copy()
    B, N_p = actions.shape
    off = 1 + N_GAMMA
    for l in range(1, N_p):
        f[np.arange(B), l, off + actions[:, l - 1]] = 1.0
    return f


def autoregressive(net: QNetwork, features: np.ndarray, choose) -> tuple[np.ndarray, np.ndarray]:
    """Run the unroll feeding each step's choice into the next step's input.

    ``choose(l, q_row_batch)`` returns the selected indices for step ``l``.
    """
    B, N_p, _ = features.shape
    H, A = net.hidden, net.n_actions
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    q_all = np.empty((B, N_p, A))
    actions = np.empty((B, N_p), dtype=int)
    off = 1 + N_GAMMA
    for l in range(N_p):
        x = features[:, l].copy()
        if l > 0:
            x[np.arange(B), off + actions[:, l - 1]] = 1.0
        h, c, q, _ = lstm_step(net, x, h, c)
        q_all[:, l] = q
        actions[:, l] = choose(l, q)
    return actions, q_all


def greedy(q: np.ndarray) -> np.ndarray:
    # argmax takes the lowest index among ties
    return np.argmax(q, axis=-1)


def decoupled_q_rollout(net: QNetwork, scaler: FeatureScaler, chi: AugmentedState, N_p: int,
                        mode: str = "greedy", xi: float = 0.0,
                        rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sub-action indices (length ``N_p``) and the Q-matrix ``(N_p, A)`` for one state."""
    feats = base_features(scaler, [chi], N_p, net.n_actions)
    if mode == "greedy":
        actions, q = autoregressive(net, feats, lambda l, q: greedy(q))
    elif mode == "boltzmann":
        if rng is None:
            raise ValueError("boltzmann selection needs a random generator")

        def sample(l, q):
            p = softmax(q, xi)
            return np.array([rng.choice(q.shape[-1], p=row) for row in p])

        actions, q = autoregressive(net, feats, sample)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return actions[0], q[0]


@dataclass(frozen=True)
class Transition:
    chi: AugmentedState
    eps_d: np.ndarray  # sub-action indices, length N_p
    reward: float
    next_chi: AugmentedState
    terminal: bool


class ReplayBuffer:
    """FIFO ring of the most recent transitions with seeded uniform sampling."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, t: Transition) -> None:
        self._items.append(t)

    def items(self) -> list[Transition]:
        return list(self._items)

    def sample(self, n: int) -> list[Transition]:
        if n > len(self._items):
            raise ValueError(f"cannot sample {n} transitions from a buffer of {len(self._items)}")
        idx = self._rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]


@dataclass(frozen=True)
class AgentConfig:
    alpha: float = 0.99
    batch_size: int = 32
    buffer_capacity: int = 10_000
    episodes: int = 2000
    steps_per_episode: int = 48
    xi_max: float = 10.0
    xi_ramp: float = 0.6
    r_inf: float = -1.0
    seed: int = 0
    hidden: int = 64
    lr: float = 1e-3
    clip_norm: float = 1.0
    reward_samples: int = 500
    reward_basis: str = "stage"
    feature_set: str = "step"

    def __post_init__(self):
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"feature_set must be one of {FEATURE_SETS}")
        if self.reward_basis not in REWARD_BASES:
            raise ValueError(f"reward_basis must be one of {REWARD_BASES}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.batch_size < 1 or self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must be between 1 and buffer_capacity")
        if self.episodes < 1 or self.steps_per_episode < 1:
            raise ValueError("episodes and steps_per_episode must be positive")
        if not 0.0 < self.xi_ramp <= 1.0:
            raise ValueError("xi_ramp must lie in (0, 1]")

    def temperature(self, episode: int) -> float:
        """Linear ramp from 0 to ``xi_max`` over the first ``xi_ramp`` share of episodes."""
        ramp = max(1.0, self.xi_ramp * self.episodes)
        return self.xi_max * min(1.0, episode / ramp)


@dataclass
class StepResult:
    reward: float
    next_chi: AugmentedState | None
    terminal: bool
    status: LpStatus
    first: FirstInput | None
    stage_cost: float | None
    objective: float | None


@dataclass(frozen=True)
class RewardScale:
    cost_lo: float
    cost_hi: float

    def __call__(self, stage_cost: float) -> float:
        return f_reward(stage_cost, self.cost_lo, self.cost_hi)


def f_reward(stage_cost: float, cost_lo: float, cost_hi: float) -> float:
    """Scaled reward in [0, 1]: 1 at ``cost_lo`` or below, 0 at ``cost_hi`` or above."""
    span = cost_hi - cost_lo
    if span <= 0:
        return 1.0 if stage_cost <= cost_lo else 0.0
    return float(np.clip((cost_hi - stage_cost) / span, 0.0, 1.0))


class MicrogridEnv:
    """Receding-horizon environment over one profile period."""

    def __init__(self, params: MicrogridParams, N_p: int, profiles: ProfileSet,
                 reward_scale: RewardScale | None = None, r_inf: float = -1.0, reward_basis: str = "stage"):
        if reward_basis not in REWARD_BASES:
            raise ValueError(f"reward_basis must be one of {REWARD_BASES}")
        self.reward_basis = reward_basis
        self.params = params
        self.N_p = N_p
        self.profiles = profiles
        self.problem: MpcProblem = build_mpc_problem(params, N_p)
        self.space: SubActionSpace = sub_action_space(params)
        self.reward_scale = reward_scale
        self.r_inf = r_inf

    @property
    def n_actions(self) -> int:
        return self.space.size

    def chi_at(self, x_b: float, k: int) -> AugmentedState:
        return AugmentedState(np.array([x_b]), self.profiles.window(k, self.N_p), k)

    def last_start(self, run_length: int = 1) -> int:
        return len(self.profiles) - self.N_p - run_length

    def sample_initial(self, rng: np.random.Generator, run_length: int = 1) -> AugmentedState:
        """Uniform time index leaving room for ``run_length`` steps, uniform storage level."""
        hi = self.last_start(run_length)
        if hi < 0:
            raise ValueError("profile period too short for the requested run length")
        k = int(rng.integers(0, hi + 1))
        x_b = float(rng.uniform(self.params.x_b_min, self.params.x_b_max))
        return self.chi_at(x_b, k)

    def solve_fixed(self, chi: AugmentedState, eps_d: np.ndarray) -> LpSolution:
        return solve_lp(fix_discrete(self.problem, chi, eps_d))

    def realize(self, chi: AugmentedState, eps_d: np.ndarray, sol: LpSolution):
        """First input and its stage cost from a fixed-binary LP solution."""
        L = self.problem.layout
        full = np.concatenate([sol.primal, eps_d])
        first = extract_first_input(full, L)
        return first, first_step_cost(self.problem, chi.x, chi.gamma, first)

    def step(self, chi: AugmentedState, indices) -> StepResult:
        eps_d = self.space.to_eps_d(indices)
        sol = self.solve_fixed(chi, eps_d)
        if sol.status is LpStatus.INFEASIBLE:
            return StepResult(self.r_inf, None, True, sol.status, None, None, None)
        if sol.status is not LpStatus.OPTIMAL:
            return StepResult(0.0, None, True, sol.status, None, None, None)
        first, cost = self.realize(chi, eps_d, sol)
        u = np.concatenate([first.u_c, first.u_d])
        x_next = mld_step(self.problem.system, chi.x, MldStep(u, first.delta, first.z))
        # keep the level inside its bounds despite LP round-off
        x_next = np.clip(x_next, self.params.x_b_min, self.params.x_b_max)
        k_next = chi.k + 1
        next_chi = self.chi_at(float(x_next[0]), k_next) if k_next + self.N_p <= len(self.profiles) else None
        scored = cost if self.reward_basis == "stage" else sol.objective
        reward = self.reward_scale(scored) if self.reward_scale is not None else float("nan")
        return StepResult(reward, next_chi, False, sol.status, first, cost, sol.objective)


def environment_step(env: MicrogridEnv, chi: AugmentedState, indices) -> StepResult:
    return env.step(chi, indices)


def _rewarded_cost(env: MicrogridEnv, chi: AugmentedState, eps_d: np.ndarray) -> float | None:
    sol = env.solve_fixed(chi, eps_d)
    if sol.status is not LpStatus.OPTIMAL:
        return None
    return env.realize(chi, eps_d, sol)[1] if env.reward_basis == "stage" else sol.objective


def feasible_random_pattern(env: MicrogridEnv, chi: AugmentedState, rng: np.random.Generator) -> np.ndarray | None:
    """Sub-actions drawn step by step, uniformly among those a one-step LP can realize from the chained level.

    The chained one-step solutions form a feasible point of the whole fixed-binary LP.
    """
    one = MicrogridEnv(env.params, 1, env.profiles)
    x_b = float(chi.x[0])
    picks = []
    for l in range(env.N_p):
        for a in rng.permutation(env.n_actions):
            res = one.step(one.chi_at(x_b, chi.k + l), [int(a)])
            if res.status is LpStatus.OPTIMAL:
                break
        else:
            return None
        picks.append(int(a))
        if res.next_chi is not None:
            x_b = float(res.next_chi.x[0])
    return np.array(picks)


def calibrate_reward(env: MicrogridEnv, samples: int, rng: np.random.Generator) -> RewardScale:
    """1st/99th percentile of the rewarded cost under uniformly random sub-actions.

    Long horizons make uniformly random patterns almost never feasible; when fewer than one in twenty
    is, the samples are redrawn step by step among the sub-actions that keep the pattern feasible.
    """
    costs = []
    for _ in range(samples):
        chi = env.sample_initial(rng)
        cost = _rewarded_cost(env, chi, env.space.to_eps_d(rng.integers(0, env.n_actions, env.N_p)))
        if cost is not None:
            costs.append(cost)
    if len(costs) < max(2, samples // 20):
        log.info("only %d of %d random patterns feasible; drawing feasible patterns step by step",
                 len(costs), samples)
        costs = []
        for _ in range(samples):
            chi = env.sample_initial(rng)
            idx = feasible_random_pattern(env, chi, rng)
            cost = None if idx is None else _rewarded_cost(env, chi, env.space.to_eps_d(idx))
            if cost is not None:
                costs.append(cost)
    if len(costs) < 2:
        raise RuntimeError("random pre-run produced fewer than two feasible steps; cannot scale rewards")
    lo, hi = np.percentile(costs, [1, 99])
    return RewardScale(float(lo), float(hi))


def td_targets(net: QNetwork, scaler: FeatureScaler, batch: list[Transition], alpha: float, N_p: int) -> np.ndarray:
    """Targets ``(B, N_p)``: the reward, plus the discounted greedy Q-row maximum for non-terminal samples."""
    rewards = np.array([t.reward for t in batch], dtype=float)
    y = np.repeat(rewards[:, None], N_p, axis=1)
    live = [i for i, t in enumerate(batch) if not t.terminal and t.next_chi is not None]
    if live and alpha > 0.0:
        feats = base_features(scaler, [batch[i].next_chi for i in live], N_p, net.n_actions)
        _, q = autoregressive(net, feats, lambda l, q: greedy(q))
        y[live] += alpha * q.max(axis=-1)
    return y


def q_loss_and_grads(net: QNetwork, scaler: FeatureScaler, batch: list[Transition], y: np.ndarray, N_p: int):
    """Mean over the batch and the horizon steps of squared TD errors at the chosen sub-actions."""
    B = len(batch)
    actions = np.array([t.eps_d for t in batch], dtype=int)
    feats = set_previous(base_features(scaler, [t.chi for t in batch], N_p, net.n_actions), actions)
    q, trace = forward_unrolled(net, feats)
    bi, li = np.meshgrid(np.arange(B), np.arange(N_p), indexing="ij")
    chosen = q[bi, li, actions]
    err = chosen - y
    loss = float(np.mean(err ** 2))
    dq = np.zeros_like(q)
    dq[bi, li, actions] = 2.0 * err / err.size
    return loss, backward(net, trace, dq)


@dataclass
class EpisodeLog:
    episode: int
    mean_reward: float
    loss: float
    infeasible: int
    xi: float
    steps: int
    aborted: int = 0


@dataclass
class TrainResult:
    net: QNetwork
    scaler: FeatureScaler
    reward_scale: RewardScale
    log: list[EpisodeLog] = field(default_factory=list)

    def log_rows(self) -> list[dict]:
        return [asdict(e) for e in self.log]


def train(env: MicrogridEnv, cfg: AgentConfig, progress=None) -> TrainResult:
    """Offline training: Boltzmann exploration, replay, one gradient step per environment step."""
    rng = np.random.default_rng(cfg.seed)
    env.reward_basis = cfg.reward_basis
    if env.reward_scale is None:
        env.reward_scale = calibrate_reward(env, cfg.reward_samples, rng)
    env.r_inf = cfg.r_inf
    scaler = FeatureScaler.fit(env.params, env.profiles, cfg.feature_set)
    net = QNetwork.init(feature_size(env.n_actions, env.N_p, cfg.feature_set), cfg.hidden, env.n_actions, rng)
    params = net.params()
    opt = Adam(lr=cfg.lr, clip_norm=cfg.clip_norm)
    buffer = ReplayBuffer(cfg.buffer_capacity, seed=int(rng.integers(2 ** 31)))
    result = TrainResult(net, scaler, env.reward_scale)
    N_p = env.N_p

    for ep in range(cfg.episodes):
        xi = cfg.temperature(ep)
        chi = env.sample_initial(rng, cfg.steps_per_episode)
        rewards, losses = [], []
        infeasible = aborted = 0
        steps = 0
        for _ in range(cfg.steps_per_episode):
            indices, _ = decoupled_q_rollout(net, scaler, chi, N_p, "boltzmann", xi, rng)
            res = env.step(chi, indices)
            steps += 1
            if res.status not in (LpStatus.OPTIMAL, LpStatus.INFEASIBLE):
                aborted = 1  # solver trouble is not the agent's fault; drop the episode
                break
            rewards.append(res.reward)
            buffer.add(Transition(chi, np.asarray(indices, dtype=int), res.reward, res.next_chi, res.terminal))
            if len(buffer) >= cfg.batch_size:
                batch = buffer.sample(cfg.batch_size)
                y = td_targets(net, scaler, batch, cfg.alpha, N_p)
                loss, grads = q_loss_and_grads(net, scaler, batch, y, N_p)
                opt.step(params, grads)
                losses.append(loss)
            if res.terminal:
                infeasible = 1
                break
            chi = res.next_chi
        entry = EpisodeLog(ep, float(np.mean(rewards)) if rewards else 0.0,
                           float(np.mean(losses)) if losses else float("nan"), infeasible, float(xi), steps, aborted)
        result.log.append(entry)
        if progress is not None:
            progress(entry)
    return result


@dataclass
class InferResult:
    indices: np.ndarray
    eps_d: np.ndarray
    eps_c: np.ndarray | None
    status: LpStatus
    objective: float | None
    wall_time: float
    forward_time: float
    lp_time: float


def infer(net: QNetwork, scaler: FeatureScaler, env: MicrogridEnv, chi: AugmentedState) -> InferResult:
    """Greedy sub-actions from the network, then the fixed-binary LP for the continuous part."""
    t0 = time.perf_counter()
    indices, _ = decoupled_q_rollout(net, scaler, chi, env.N_p, "greedy")
    t1 = time.perf_counter()
    eps_d = env.space.to_eps_d(indices)
    sol = env.solve_fixed(chi, eps_d)
    t2 = time.perf_counter()
    return InferResult(indices, eps_d, sol.primal, sol.status, sol.objective, t2 - t0, t1 - t0, t2 - t1)


def model_meta(kind: str, env: MicrogridEnv, scaler: FeatureScaler, reward_scale: RewardScale | None,
               extra: dict | None = None) -> dict:
    meta = {
        "kind": kind,
        "N_p": env.N_p,
        "params": asdict(env.params),
        "scaler": scaler.to_dict(),
        "feature_layout": feature_layout(env.n_actions, env.N_p, scaler.feature_set),
        "sub_action_order": ["delta_grid", "delta_b"] + [f"delta_dis_{i + 1}" for i in range(env.params.N_gen)],
        "n_actions": env.n_actions,
    }
    if reward_scale is not None:
        meta["reward_scale"] = {"cost_lo": reward_scale.cost_lo, "cost_hi": reward_scale.cost_hi}
    meta.update(extra or {})
    return meta


def check_meta(meta: dict, net: QNetwork) -> tuple[int, MicrogridParams, FeatureScaler]:
    """Validate a loaded artifact's metadata against its weights."""
    for key in ("N_p", "params", "scaler", "n_actions", "sub_action_order"):
        if key not in meta:
            raise ValueError(f"model artifact metadata is missing {key!r}")
    params = MicrogridParams(**meta["params"])
    if meta["n_actions"] != net.n_actions or sub_action_space(params).size != net.n_actions:
        raise ValueError("model artifact sub-action count does not match the network head")
    scaler = FeatureScaler.from_dict(meta["scaler"])
    if feature_size(net.n_actions, int(meta["N_p"]), scaler.feature_set) != net.input_size:
        raise ValueError("model artifact input layout does not match the network input size")
    expected = ["delta_grid", "delta_b"] + [f"delta_dis_{i + 1}" for i in range(params.N_gen)]
    if meta["sub_action_order"] != expected:
        raise ValueError("model artifact uses a different sub-action ordering")
    return int(meta["N_p"]), params, scaler
