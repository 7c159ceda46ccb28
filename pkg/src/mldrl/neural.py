"""Single-layer LSTM with a shared dense head, trained by backpropagation through time.

Gate blocks inside the stacked weight matrices are ordered input, forget,
output, cell candidate. Everything runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PARAM_NAMES = ("w_input", "w_recurrent", "bias", "head_w", "head_b")
FORMAT = "mldrl-qnet"
FORMAT_VERSION = 1


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class QNetwork:
    """LSTM weights plus a dense head mapping the hidden state to one value per sub-action."""

    w_input: np.ndarray      # (4H, D)
    w_recurrent: np.ndarray  # (4H, H)
    bias: np.ndarray         # (4H,)
    head_w: np.ndarray       # (A, H)
    head_b: np.ndarray       # (A,)

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        H = self.hidden
        D = self.input_size
        A = self.n_actions
        expected = {"w_input": (4 * H, D), "w_recurrent": (4 * H, H), "bias": (4 * H,),
                    "head_w": (A, H), "head_b": (A,)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite weights")

    @property
    def hidden(self) -> int:
        return self.w_recurrent.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_input.shape[1]

    @property
    def n_actions(self) -> int:
        return self.head_w.shape[0]

    @classmethod
    def init(cls, input_size: int, hidden: int, n_actions: int, rng: np.random.Generator) -> "QNetwork":
        """Uniform weights in +-1/sqrt(fan_in); forget-gate bias starts at 1."""
        H = hidden
        k_lstm = 1.0 / np.sqrt(input_size + H)
        k_head = 1.0 / np.sqrt(H)
        bias = rng.uniform(-k_lstm, k_lstm, 4 * H)
        bias[H:2 * H] = 1.0
        return cls(
            w_input=rng.uniform(-k_lstm, k_lstm, (4 * H, input_size)),
            w_recurrent=rng.uniform(-k_lstm, k_lstm, (4 * H, H)),
            bias=bias,
            head_w=rng.uniform(-k_head, k_head, (n_actions, H)),
            head_b=rng.uniform(-k_head, k_head, n_actions),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "QNetwork":
        return QNetwork(**{k: v.copy() for k, v in self.params().items()})

    def same_shapes(self, other: "QNetwork") -> bool:
        return all(getattr(self, n).shape == getattr(other, n).shape for n in PARAM_NAMES)


@dataclass
class Trace:
    """Forward-pass intermediates retained for backpropagation."""

    inputs: np.ndarray  # (B, L, D)
    gates: np.ndarray   # (B, L, 4H) after the nonlinearities
    cells: np.ndarray   # (B, L+1, H), index 0 is the initial cell state
    hiddens: np.ndarray  # (B, L+1, H)


def lstm_step(net: QNetwork, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    """One recurrence step for a batch; returns ``(h, c, q, gates)``."""
    H = net.hidden
    a = x @ net.w_input.T + h @ net.w_recurrent.T + net.bias
    gates = np.empty_like(a)
    gates[:, :3 * H] = _sigmoid(a[:, :3 * H])
    gates[:, 3 * H:] = np.tanh(a[:, 3 * H:])
    i, f, o, g = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    q = h_new @ net.head_w.T + net.head_b
    return h_new, c_new, q, gates


def forward_unrolled(net: QNetwork, inputs) -> tuple[np.ndarray, Trace]:
    """Q-values for every step of the unroll.

    ``inputs`` has shape ``(L, D)`` or ``(B, L, D)``; the returned Q array has
    shape ``(L, A)`` or ``(B, L, A)`` to match.
    """
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != net.input_size:
        raise ValueError(f"expected inputs of shape (L, {net.input_size}) or (B, L, {net.input_size}), got {np.shape(inputs)}")
    B, L, _ = x.shape
    H, A = net.hidden, net.n_actions
    gates = np.empty((B, L, 4 * H))
    cells = np.zeros((B, L + 1, H))
    hiddens = np.zeros((B, L + 1, H))
    q = np.empty((B, L, A))
    for l in range(L):
        h, c, q[:, l], gates[:, l] = lstm_step(net, x[:, l], hiddens[:, l], cells[:, l])
        hiddens[:, l + 1], cells[:, l + 1] = h, c
    trace = Trace(x, gates, cells, hiddens)
    return (q[0] if single else q), trace


def backward(net: QNetwork, trace: Trace, dq) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient ``dq`` with respect to the Q output."""
    dq = np.asarray(dq, dtype=float)
    if dq.ndim == 2:
        dq = dq[None]
    B, L, _ = trace.inputs.shape
    if dq.shape != (B, L, net.n_actions):
        raise ValueError(f"upstream gradient must have shape {(B, L, net.n_actions)}, got {dq.shape}")
    H = net.hidden
    grads = {name: np.zeros_like(arr) for name, arr in net.params().items()}
    hs = trace.hiddens[:, 1:]  # (B, L, H)
    grads["head_w"] = dq.reshape(-1, net.n_actions).T @ hs.reshape(-1, H)
    grads["head_b"] = dq.sum(axis=(0, 1))
    dh_out = dq @ net.head_w  # (B, L, H)

    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    da_all = np.empty((B, L, 4 * H))
    for l in range(L - 1, -1, -1):
        g = trace.gates[:, l]
        i, f, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        c = trace.cells[:, l + 1]
        c_prev = trace.cells[:, l]
        tc = np.tanh(c)
        dh = dh_out[:, l] + dh_next
        dc = dc_next + dh * o * (1.0 - tc ** 2)
        da = da_all[:, l]
        da[:, :H] = dc * cand * i * (1.0 - i)
        da[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        da[:, 3 * H:] = dc * i * (1.0 - cand ** 2)
        dh_next = da @ net.w_recurrent
        dc_next = dc * f
    da_flat = da_all.reshape(-1, 4 * H).T
    grads["w_input"] = da_flat @ trace.inputs.reshape(B * L, -1)
    grads["w_recurrent"] = da_flat @ trace.hiddens[:, :-1].reshape(B * L, H)
    grads["bias"] = da_all.sum(axis=(0, 1))
    return grads


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    """Probabilities proportional to ``exp(temperature * v)``."""
    v = np.asarray(v, dtype=float)
    s = temperature * (v - v.max(axis=-1, keepdims=True))
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Adam:
    """Adaptive moment estimation with bias correction and global-norm clipping."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> bool:
        """Update ``params`` in place; returns False (and changes nothing) on a non-finite gradient."""
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ValueError(f"gradient {name} has shape {g.shape}, parameter has {params[name].shape}")
        sq = sum(float(np.sum(g * g)) for g in grads.values())
        if not np.isfinite(sq):
            self.skipped += 1
            return False
        norm = np.sqrt(sq)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            g = g * scale
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
        return True


def clip_by_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def save_network(net: QNetwork, path: str | Path, meta: dict | None = None) -> None:
    doc = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "shapes": {"input_size": net.input_size, "hidden": net.hidden, "n_actions": net.n_actions},
        "weights": {name: arr.tolist() for name, arr in net.params().items()},
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_network(path: str | Path) -> tuple[QNetwork, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read model artifact {path}: {exc}") from None
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} artifact")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported artifact version {doc.get('version')!r}")
    missing = [k for k in PARAM_NAMES if k not in doc.get("weights", {})]
    if missing:
        raise ValueError(f"{path}: missing weights {', '.join(missing)}")
    net = QNetwork(**{k: np.array(doc["weights"][k], dtype=float) for k in PARAM_NAMES})
    shapes = doc.get("shapes", {})
    actual = {"input_size": net.input_size, "hidden": net.hidden, "n_actions": net.n_actions}
    if shapes != actual:
        raise ValueError(f"{path}: declared shapes {shapes} do not match weights {actual}")
    return net, doc.get("meta", {})
