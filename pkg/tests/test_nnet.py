import numpy as np
import pytest

from sbevloc.errors import FormatError, InputError, NumericalError
from sbevloc import nnet
from sbevloc.nnet import (
    DenseNet,
    Layer,
    OptState,
    TrainConfig,
    backward,
    forward,
    init_net,
    load_weights,
    mse_loss,
    optimizer_step,
    save_weights,
    train,
)

# --- gradient-check helpers ----------------------------------------------

def flat_params(net):
    return np.concatenate([p.ravel() for l in net.layers for p in (l.weights, l.bias)])


def set_params(net, theta):
    i = 0
    for l in net.layers:
        for attr in ("weights", "bias"):
            p = getattr(l, attr)
            setattr(l, attr, theta[i:i + p.size].reshape(p.shape).copy())
            i += p.size


def loss_of(net, x, y, masks=None):
    mode = "train" if masks is not None else "eval"
    out, _ = forward(net, x, mode=mode, masks=masks)
    loss, _ = mse_loss(out, y)
    return loss


def analytic_grad(net, x, y, masks=None):
    mode = "train" if masks is not None else "eval"
    out, rec = forward(net, x, mode=mode, masks=masks)
    _, g = mse_loss(out, y)
    grads = backward(net, rec, g)
    return np.concatenate([d.ravel() for gw in grads for d in gw])


def numeric_grad(net, x, y, masks=None, h=1e-5, indices=None):
    theta0 = flat_params(net)
    idx = range(len(theta0)) if indices is None else indices
    g = np.zeros(len(theta0))
    work = net.copy()
    for j in idx:
        tp = theta0.copy()
        tp[j] += h
        set_params(work, tp)
        lp = loss_of(work, x, y, masks)
        tp[j] -= 2 * h
        set_params(work, tp)
        lm = loss_of(work, x, y, masks)
        g[j] = (lp - lm) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)


# --- forward --------------------------------------------------------------

def test_forward_identity_layer():
    net = DenseNet([Layer(np.eye(4), np.zeros(4), "linear")])
    x = np.array([1.0, -2.0, 3.0, 0.5])
    out, _ = forward(net, x)
    assert np.array_equal(out, x)


def test_forward_relu_clips():
    net = DenseNet([Layer(np.eye(3), np.array([-10.0, -10.0, -10.0]), "relu")])
    out, _ = forward(net, np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(out, np.zeros(3))


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    net = init_net([5, 4, 3], ["relu", "sigmoid"], seed=1)
    x = rng.normal(size=5)
    out, _ = forward(net, x)
    # scalar-loop re-implementation
    h = list(x)
    for layer in net.layers:
        z = []
        for r in range(layer.weights.shape[0]):
            acc = layer.bias[r]
            for c in range(layer.weights.shape[1]):
                acc += layer.weights[r, c] * h[c]
            z.append(acc)
        if layer.activation == "relu":
            h = [max(v, 0.0) for v in z]
        elif layer.activation == "sigmoid":
            h = [1.0 / (1.0 + np.exp(-v)) for v in z]
        else:
            h = z
    assert np.abs(out - np.array(h)).max() < 1e-12


def test_forward_dim_mismatch():
    net = init_net([5, 3], ["linear"])
    with pytest.raises(InputError):
        forward(net, np.zeros(4))


def test_dropout_eval_is_identity():
    net = init_net([6, 6], ["linear"], dropout=[0.5], seed=2)
    x = np.random.default_rng(1).normal(size=6)
    a, _ = forward(net, x, mode="eval")
    b, _ = forward(net, x, mode="eval")
    nodrop = DenseNet([Layer(net.layers[0].weights, net.layers[0].bias, "linear")])
    c, _ = forward(nodrop, x)
    assert np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_dropout_train_mode_scales():
    net = init_net([50, 50], ["linear"], dropout=[0.4], seed=3)
    rng = np.random.default_rng(4)
    out, rec = forward(net, np.ones(50), mode="train", rng=rng)
    mask = rec.masks[0]
    assert set(np.unique(mask.round(6))) <= {0.0, round(1 / 0.6, 6)}


# --- backward ---------------------------------------------------------------

def test_backward_hand_case():
    # y = w*x, L = (y - t)^2 -> dL/dw = 2 (w x - t) x
    w, x, t = 3.0, 2.0, 1.0
    net = DenseNet([Layer(np.array([[w]]), np.zeros(1), "linear")])
    out, rec = forward(net, np.array([x]))
    loss, g = mse_loss(out, np.array([t]))
    (dw, db), = backward(net, rec, g)
    assert dw[0, 0] == pytest.approx(2 * (w * x - t) * x)
    assert db[0] == pytest.approx(2 * (w * x - t))


def test_backward_zero_gradient():
    net = init_net([4, 3, 2], ["relu", "linear"], seed=5)
    out, rec = forward(net, np.ones(4))
    grads = backward(net, rec, np.zeros_like(out))
    for dw, db in grads:
        assert not dw.any() and not db.any()


def test_backward_rejects_stale_record():
    net = init_net([4, 3], ["linear"], seed=6)
    other = init_net([4, 5, 3], ["relu", "linear"], seed=7)
    _, rec = forward(other, np.ones(4))
    with pytest.raises(InputError):
        backward(net, rec, np.zeros(3))


@pytest.mark.parametrize("act", ["linear", "relu", "sigmoid"])
def test_gradient_single_layer_types(act):
    rng = np.random.default_rng(hash(act) % 2**31)
    for _ in range(5):
        net = init_net([6, 4], [act], seed=int(rng.integers(1e6)))
        x = rng.normal(size=(3, 6))
        y = rng.normal(size=(3, 4))
        ga = analytic_grad(net, x, y)
        gn = numeric_grad(net, x, y)
        assert rel_err(ga, gn).max() < 1e-4


def test_gradient_deep_net_with_dropout():
    rng = np.random.default_rng(8)
    net = init_net([8, 10, 6, 3], ["relu", "relu", "linear"],
                   dropout=[0.3, 0.3, 0.0], seed=9)
    x = rng.normal(size=(4, 8))
    y = rng.normal(size=(4, 3))
    _, rec = forward(net, x, mode="train", rng=np.random.default_rng(10))
    masks = rec.masks
    ga = analytic_grad(net, x, y, masks=masks)
    gn = numeric_grad(net, x, y, masks=masks)
    assert rel_err(ga, gn).max() < 1e-4


# --- mse_loss ---------------------------------------------------------------

def test_mse_trivia():
    loss, g = mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert loss == 0 and not g.any()
    loss, g = mse_loss(np.array([2.0]), np.array([0.0]))
    assert loss == 4.0
    assert g[0] == 4.0


def test_mse_gradient_finite_difference():
    rng = np.random.default_rng(11)
    p = rng.normal(size=7)
    t = rng.normal(size=7)
    _, g = mse_loss(p, t)
    h = 1e-6
    for i in range(7):
        dp = p.copy()
        dp[i] += h
        lp, _ = mse_loss(dp, t)
        dp[i] -= 2 * h
        lm, _ = mse_loss(dp, t)
        assert abs((lp - lm) / (2 * h) - g[i]) < 1e-6


def test_mse_length_mismatch():
    with pytest.raises(InputError):
        mse_loss(np.zeros(3), np.zeros(4))


def test_mse_weighted():
    loss, g = mse_loss(np.array([1.0, 1.0]), np.array([0.0, 0.0]),
                       weights=(4.0, 1.0))
    assert loss == pytest.approx((4 + 1) / 2)
    assert np.allclose(g, [4.0, 1.0])


# --- optimizer ---------------------------------------------------------------

def one_param_net(w=1.0):
    return DenseNet([Layer(np.array([[w]]), np.zeros(1), "linear")])


def test_sgd_step():
    net = one_param_net(1.0)
    cfg = TrainConfig(optimizer="sgd", learning_rate=0.1)
    optimizer_step(net, [(np.array([[2.0]]), np.zeros(1))], cfg)
    assert net.layers[0].weights[0, 0] == pytest.approx(0.8)


def test_zero_gradient_no_change():
    for opt in ("sgd", "adam"):
        net = one_param_net(1.5)
        cfg = TrainConfig(optimizer=opt, learning_rate=0.1)
        optimizer_step(net, [(np.zeros((1, 1)), np.zeros(1))], cfg)
        assert net.layers[0].weights[0, 0] == 1.5


def test_adam_quadratic_bowl():
    # minimize (w - 3)^2 by gradient descent with Adam
    net = one_param_net(-5.0)
    cfg = TrainConfig(optimizer="adam", learning_rate=0.05)
    state = OptState()
    for _ in range(2000):
        w = net.layers[0].weights[0, 0]
        g = 2 * (w - 3.0)
        state = optimizer_step(net, [(np.array([[g]]), np.zeros(1))], cfg, state)
    assert abs(net.layers[0].weights[0, 0] - 3.0) < 1e-3


# --- train -------------------------------------------------------------------

def test_train_linear_regression_converges():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(3, 5))
    x = rng.normal(size=(200, 5))
    y = x @ a.T
    net = init_net([5, 3], ["linear"], seed=13)
    cfg = TrainConfig(optimizer="adam", learning_rate=0.01, batch_size=32,
                      epochs=200, seed=13)
    trained, losses = train(net, x, y, cfg)
    assert losses[-1] < 1e-6
    assert losses[0] > losses[-1]


def test_train_zero_epochs_unchanged():
    net = init_net([4, 2], ["linear"], seed=14)
    before = flat_params(net).copy()
    trained, losses = train(net, np.ones((3, 4)), np.ones((3, 2)),
                            TrainConfig(epochs=0))
    assert losses == []
    assert np.array_equal(flat_params(trained), before)
    assert np.array_equal(flat_params(net), before)  # original untouched


def test_train_deterministic_per_seed():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(100, 6))
    y = rng.normal(size=(100, 2))
    net = init_net([6, 8, 2], ["relu", "linear"], dropout=[0.2, 0.0], seed=16)
    cfg = TrainConfig(epochs=5, seed=17)
    a, la = train(net, x, y, cfg)
    b, lb = train(net, x, y, cfg)
    assert la == lb
    assert np.array_equal(flat_params(a), flat_params(b))
    c, lc = train(net, x, y, TrainConfig(epochs=5, seed=18))
    assert not np.array_equal(flat_params(a), flat_params(c))


def test_train_aborts_on_nonfinite():
    x = np.array([[1e300, 1e300]])
    y = np.array([[0.0]])
    net = init_net([2, 1], ["linear"], seed=19)
    net.layers[0].weights[:] = 1e300
    with np.errstate(over="ignore"), pytest.raises(NumericalError, match="epoch 0"):
        train(net, x, y, TrainConfig(epochs=1, optimizer="sgd"))


# --- weights file -------------------------------------------------------------

def test_weights_round_trip(tmp_path):
    net = init_net([7, 5, 2], ["relu", "sigmoid"], dropout=[0.25, 0.0], seed=20,
                   dtype=np.float32)
    p = tmp_path / "w.sbnn"
    save_weights(p, net)
    back = load_weights(p)
    assert len(back.layers) == 2
    for a, b in zip(net.layers, back.layers):
        assert np.array_equal(a.weights.astype(np.float32), b.weights)
        assert np.array_equal(a.bias.astype(np.float32), b.bias)
        assert a.activation == b.activation
        assert a.dropout == pytest.approx(b.dropout)
    # float32 nets survive save/load bit-exactly
    p2 = tmp_path / "w2.sbnn"
    save_weights(p2, back)
    assert p.read_bytes() == p2.read_bytes()


def test_weights_bad_magic(tmp_path):
    p = tmp_path / "bad.sbnn"
    p.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        load_weights(p)


def test_weights_truncated(tmp_path):
    net = init_net([3, 2], ["linear"], seed=21, dtype=np.float32)
    p = tmp_path / "w.sbnn"
    save_weights(p, net)
    (tmp_path / "t.sbnn").write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError, match="truncated"):
        load_weights(tmp_path / "t.sbnn")


# --- full-size architecture spot checks ---------------------------------------

def test_gradient_full_size_autoencoder_spot_check():
    rng = np.random.default_rng(22)
    net = init_net([1936, 512, 128, 512, 1936],
                   ["relu", "relu", "relu", "linear"], seed=23)
    x = rng.normal(size=1936) * 0.1
    y = rng.normal(size=1936) * 0.1
    ga = analytic_grad(net, x, y)
    idx = rng.choice(len(ga), 120, replace=False)
    gn = numeric_grad(net, x, y, indices=idx)
    assert rel_err(ga[idx], gn[idx]).max() < 1e-4
