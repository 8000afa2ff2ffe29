import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oudrisk.metrics import f1_score
from oudrisk.neural import (AdamState, DenseNet, DenseNetConfig, LstmNet, LstmNetConfig,
                            TrainingDiverged, TrainParams, adam_step, bce_loss, gradient_check,
                            lstm_cell_step, sigmoid, train)


def scalar_cell(x, h, c, W, U, b):
    """Loop-by-loop LSTM step written from the gate definitions."""
    H = len(h)

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    pre = [sum(x[k] * W[k, j] for k in range(len(x))) + sum(h[k] * U[k, j] for k in range(H))
           + b[j] for j in range(4 * H)]
    h_new, c_new = np.zeros(H), np.zeros(H)
    for u in range(H):
        i, f, o = sig(pre[u]), sig(pre[H + u]), sig(pre[2 * H + u])
        g = math.tanh(pre[3 * H + u])
        c_new[u] = f * c[u] + i * g
        h_new[u] = o * math.tanh(c_new[u])
    return h_new, c_new


def random_cell(seed, F=4, H=3):
    rng = np.random.default_rng(seed)
    return {"W": rng.normal(size=(F, 4 * H)), "U": rng.normal(size=(H, 4 * H)),
            "b": rng.normal(size=4 * H)}, rng


def small_dense(seed):
    net = DenseNet(4, DenseNetConfig((6, 5, 4, 3, 3, 2), 0.3, 5), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for k in net.params:
        if k.startswith("b"):  # keep pre-activations off the relu kink
            net.params[k][:] = rng.uniform(0.05, 0.2, net.params[k].shape)
    return net


def check_inputs(seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(2, 5, 4)), np.array([1, 0])


@pytest.mark.parametrize("seed", range(3))
def test_cell_step_matches_scalar_loop(seed):
    p, rng = random_cell(seed)
    x, h, c = rng.normal(size=4), rng.normal(size=3), rng.normal(size=3)
    h1, c1 = lstm_cell_step(x, h, c, p)
    h2, c2 = scalar_cell(x, h, c, p["W"], p["U"], p["b"])
    np.testing.assert_allclose(h1, h2, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(c1, c2, rtol=1e-12, atol=1e-14)


def test_zero_weight_cell():
    p = {"W": np.zeros((4, 12)), "U": np.zeros((3, 12)), "b": np.zeros(12)}
    c_prev = np.array([1.0, -2.0, 0.5])
    h, c = lstm_cell_step(np.ones(4), np.zeros(3), c_prev, p)
    # every gate is 0.5 and the candidate is 0
    np.testing.assert_allclose(c, 0.5 * c_prev)
    np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * c_prev))


def test_saturated_forget_gate_keeps_cell():
    p = {"W": np.zeros((4, 12)), "U": np.zeros((3, 12)), "b": np.zeros(12)}
    p["b"][3:6] = 50.0
    p["b"][0:3] = -50.0
    c_prev = np.array([0.3, -0.7, 1.2])
    _, c = lstm_cell_step(np.ones(4), np.zeros(3), c_prev, p)
    np.testing.assert_allclose(c, c_prev, atol=1e-12)


def test_cell_shape_errors():
    p, _ = random_cell(0)
    with pytest.raises(ValueError):
        lstm_cell_step(np.zeros(5), np.zeros(3), np.zeros(3), p)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_hidden_state_bounded(seed):
    net = LstmNet(4, LstmNetConfig(2, 3, 5), seed=seed, dtype=np.float64)
    X = np.random.default_rng(seed).normal(scale=20, size=(3, 5, 4))
    _, cache = net.forward(X)
    assert np.all(np.abs(cache["h_top"]) < 1)


def test_forget_bias_initialised_to_one():
    net = LstmNet(4, LstmNetConfig(2, 3, 5))
    for layer in range(2):
        b = net.params[f"b{layer}"]
        assert np.all(b[3:6] == 1) and np.all(b[:3] == 0) and np.all(b[6:] == 0)


@pytest.mark.parametrize("make", [lambda: LstmNet(4, LstmNetConfig(2, 3, 5)),
                                  lambda: DenseNet(4, DenseNetConfig((5, 3), 0.0, 0))])
def test_zero_weights_give_half(make):
    net = make()
    for v in net.params.values():
        v[:] = 0
    X = np.random.default_rng(0).normal(size=(3, 5, 4))
    X = X if net.kind == "lstm" else X[:, 0]
    p, _ = net.forward(X)
    np.testing.assert_array_equal(p, 0.5)


def test_predictions_are_batch_independent():
    net = LstmNet(4, LstmNetConfig(2, 3, 5), seed=1, dtype=np.float64)
    X = np.random.default_rng(2).normal(size=(6, 5, 4))
    full, _ = net.forward(X)
    one = np.array([net.forward(X[i:i + 1])[0][0] for i in range(6)])
    np.testing.assert_allclose(full, one, rtol=1e-12)


def test_bce_values():
    assert bce_loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2))
    assert bce_loss([0.9, 0.2], [1, 0]) == pytest.approx(0.1643, abs=1e-4)


def test_bce_clipped_is_finite():
    assert math.isfinite(bce_loss([0.0, 1.0], [1, 0]))


def test_sigmoid_extremes():
    z = np.array([-1000.0, 0.0, 1000.0])
    np.testing.assert_array_equal(sigmoid(z), [0.0, 0.5, 1.0])


@pytest.mark.parametrize("seed", range(3))
def test_lstm_gradient_check(seed):
    X, y = check_inputs(seed)
    net = LstmNet(4, LstmNetConfig(2, 3, 5), seed=seed, dtype=np.float64)
    errors = gradient_check(net, X, y)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("dropout_seed", [None, 7])
def test_dense_gradient_check(dropout_seed):
    X, y = check_inputs(1)
    errors = gradient_check(small_dense(1), X[:, 0], y, dropout_seed=dropout_seed)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("kind", ["lstm", "dense"])
def test_duplicated_batch_same_gradient(kind):
    X, y = check_inputs(3)
    net = LstmNet(4, LstmNetConfig(2, 3, 5), seed=3, dtype=np.float64) if kind == "lstm" \
        else small_dense(3)
    X = X if kind == "lstm" else X[:, 0]
    g1 = net.backward(net.forward(X)[1], y)
    g2 = net.backward(net.forward(np.concatenate([X, X]))[1], np.concatenate([y, y]))
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-15)


def test_adam_first_step_is_learning_rate():
    params = {"w": np.array([1.0, -2.0])}
    adam_step(params, {"w": np.array([3.0, -0.01])}, AdamState(learning_rate=0.1))
    np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-6)


def test_adam_minimises_square():
    params = {"w": np.array([1.0])}
    state = AdamState(learning_rate=0.1)
    for _ in range(100):
        adam_step(params, {"w": 2 * params["w"]}, state)
    assert abs(params["w"][0]) < 0.1


def test_adam_zero_gradient_is_noop():
    params = {"w": np.array([0.25, -1.5])}
    state = AdamState()
    for _ in range(5):
        adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"], [0.25, -1.5])


def test_adam_rejects_nan():
    with pytest.raises(TrainingDiverged, match="w"):
        adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 1.0])}, AdamState())


def separable_sequences(seed, n=400):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(scale=0.3, size=(n, 5, 4))
    X[:, -1, 0] += np.where(y == 1, 1.0, -1.0)
    return X.astype(np.float32), y


def test_lstm_learns_separable_toy():
    X, y = separable_sequences(0)
    net = LstmNet(4, LstmNetConfig(2, 8, 5), seed=0)
    res = train(net, X[:300], y[:300], X[300:], y[300:],
                TrainParams(lr=0.01, batch=32, epochs=40, patience=10))
    p, _ = res.model.forward(X[300:])
    assert np.mean((p >= 0.5) == y[300:]) >= 0.99


def test_training_is_deterministic():
    X, y = separable_sequences(1, n=120)
    out = []
    for _ in range(2):
        net = DenseNet(20, DenseNetConfig((8, 4), 0.3, 1), seed=5)
        res = train(net, X[:80].reshape(80, -1), y[:80], X[80:].reshape(40, -1), y[80:],
                    TrainParams(lr=0.01, batch=16, epochs=5, patience=5, seed=5))
        out.append((res.loss_curve, {k: v.tobytes() for k, v in res.model.params.items()}))
    assert out[0] == out[1]


def test_train_restores_best_epoch():
    X, y = separable_sequences(2, n=120)
    net = LstmNet(4, LstmNetConfig(1, 4, 5), seed=2)
    res = train(net, X[:80], y[:80], X[80:], y[80:], TrainParams(lr=0.01, batch=16, epochs=8,
                                                                   patience=3))
    assert 1 <= res.best_epoch <= len(res.val_f1)
    p, _ = res.model.forward(X[80:])
    assert f1_score(p, y[80:]) == pytest.approx(max(res.val_f1))
