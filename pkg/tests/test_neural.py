import numpy as np
import pytest

from mldrl.neural import (Adam, QNetwork, backward, clip_by_norm, forward_unrolled, load_network, lstm_step,
                          save_network, softmax)

from oracles import finite_difference_errors


def small_net(seed=0, D=5, H=4, A=3):
    return QNetwork.init(D, H, A, np.random.default_rng(seed))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bptt_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed, D=5, H=6, A=4)
    x = rng.normal(size=(2, 4, 5))
    w = rng.normal(size=(2, 4, 4))
    errors = finite_difference_errors(net, x, w)
    assert max(errors.values()) <= 1e-4, errors


def test_hand_computed_single_unit():
    # one input, one hidden unit, one action, all weights chosen by hand
    net = QNetwork(w_input=[[0.5], [-0.3], [0.8], [0.2]], w_recurrent=[[0.0]] * 4,
                   bias=[0.1, 0.0, -0.1, 0.05], head_w=[[2.0]], head_b=[0.5])
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    x = 1.5
    i, o, g = sig(0.5 * x + 0.1), sig(0.8 * x - 0.1), np.tanh(0.2 * x + 0.05)
    c = i * g
    h = o * np.tanh(c)
    q, _ = forward_unrolled(net, [[x]])
    assert q[0, 0] == pytest.approx(2.0 * h + 0.5, abs=1e-12)


def test_outputs_are_causal():
    rng = np.random.default_rng(5)
    net = small_net(5)
    x = rng.normal(size=(6, 5))
    q1, _ = forward_unrolled(net, x)
    x2 = x.copy()
    x2[3:] += rng.normal(size=(3, 5))
    q2, _ = forward_unrolled(net, x2)
    assert np.array_equal(q1[:3], q2[:3])
    assert not np.allclose(q1[3:], q2[3:])


def test_batch_matches_single_sequences_and_steps():
    rng = np.random.default_rng(6)
    net = small_net(6)
    x = rng.normal(size=(3, 4, 5))
    qb, _ = forward_unrolled(net, x)
    for b in range(3):
        assert np.allclose(qb[b], forward_unrolled(net, x[b])[0])
    h = c = np.zeros((1, net.hidden))
    for l in range(4):
        h, c, q, _ = lstm_step(net, x[:1, l], h, c)
        assert np.allclose(q[0], qb[0, l])


def test_shape_errors():
    net = small_net()
    with pytest.raises(ValueError):
        forward_unrolled(net, np.zeros((2, 4)))
    _, trace = forward_unrolled(net, np.zeros((2, 3, 5)))
    with pytest.raises(ValueError):
        backward(net, trace, np.zeros((2, 3, 2)))
    with pytest.raises(ValueError):
        QNetwork(w_input=np.zeros((8, 3)), w_recurrent=np.zeros((8, 3)), bias=np.zeros(8),
                 head_w=np.zeros((2, 2)), head_b=np.zeros(2))


def test_softmax_properties():
    v = np.array([[1000.0, 1001.0, 999.0], [0.0, 0.0, 0.0]])
    p = softmax(v)
    assert np.allclose(p.sum(axis=-1), 1.0) and np.all(np.isfinite(p))
    assert np.allclose(p[1], 1 / 3)
    assert np.argmax(softmax(v[0], temperature=50.0)) == 1
    assert np.allclose(softmax(v[0], temperature=0.0), 1 / 3)


def test_adam_minimizes_quadratic():
    target = np.array([1.0, -2.0, 3.0])
    params = {"w": np.zeros(3)}
    opt = Adam(lr=0.05, clip_norm=None)
    for _ in range(2000):
        opt.step(params, {"w": 2.0 * (params["w"] - target)})
    assert np.allclose(params["w"], target, atol=1e-3)


def test_adam_first_step_size_and_nonfinite_skip():
    params = {"w": np.zeros(2)}
    opt = Adam(lr=0.1, clip_norm=1.0)
    assert opt.step(params, {"w": np.array([30.0, -40.0])})
    # bias-corrected first step moves each coordinate by lr against the gradient sign
    assert np.allclose(params["w"], [-0.1, 0.1], atol=1e-6)
    before = params["w"].copy()
    assert not opt.step(params, {"w": np.array([np.nan, 1.0])})
    assert np.array_equal(params["w"], before) and opt.skipped == 1


def test_clip_by_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = clip_by_norm(g, 1.0)
    assert np.hypot(out["a"][0], out["b"][0]) == pytest.approx(1.0)
    assert clip_by_norm(g, 10.0) is g


def test_save_load_round_trip(tmp_path):
    net = small_net(9)
    path = tmp_path / "net.json"
    save_network(net, path, {"kind": "test"})
    loaded, meta = load_network(path)
    assert meta == {"kind": "test"}
    for name, arr in net.params().items():
        assert np.array_equal(arr, getattr(loaded, name))


def test_load_rejects_bad_artifacts(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_network(bad)
    with pytest.raises(ValueError):
        load_network(tmp_path / "missing.json")
