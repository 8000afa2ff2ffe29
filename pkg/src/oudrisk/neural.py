"""Dense network and two-layer LSTM written directly in numpy.

Both models keep their parameters in a flat ``dict[str, ndarray]`` so the
optimizer, gradient checks and serialization treat them uniformly. Forward
passes return a cache that :meth:`backward` consumes; gradients are those of
the mean binary cross-entropy over the batch.

LSTM gates are packed along the last axis in the order input, forget,
output, candidate.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import f1_score

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


class TrainingDiverged(FloatingPointError):
    pass


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(p, y) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _uniform(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------- dense network

@dataclass
class DenseNetConfig:
    hidden_dims: tuple = (512, 512, 512, 512, 512, 8)
    dropout_rate: float = 0.3
    n_dropout: int = 5  # dropout follows this many leading layers


class DenseNet:
    kind = "dense"

    def __init__(self, n_features: int, config: DenseNetConfig | None = None, seed=0,
                 dtype=np.float32, params: dict | None = None):
        self.config = config or DenseNetConfig()
        self.n_features = n_features
        self.dtype = np.dtype(dtype)
        dims = (n_features, *self.config.hidden_dims, 1)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for i, (a, b) in enumerate(zip(dims, dims[1:])):
                params[f"W{i}"] = _uniform(rng, (a, b), a, b, self.dtype)
                params[f"b{i}"] = np.zeros(b, dtype=self.dtype)
        self.params = params
        self.n_layers = len(dims) - 1

    def forward(self, X, train=False, rng=None):
        cfg = self.config
        a = np.asarray(X, dtype=self.dtype)
        if a.ndim != 2 or a.shape[1] != self.n_features:
            raise ValueError(f"expected (batch, {self.n_features}) input, got {a.shape}")
        cache = {"a": [a], "masks": []}
        for i in range(self.n_layers - 1):
            z = a @ self.params[f"W{i}"] + self.params[f"b{i}"]
            a = np.maximum(z, 0)
            mask = None
            if train and i < cfg.n_dropout and cfg.dropout_rate > 0:
                keep = 1.0 - cfg.dropout_rate
                mask = (rng.random(a.shape) < keep).astype(self.dtype) / self.dtype.type(keep)
                a = a * mask
            cache["masks"].append(mask)
            cache["a"].append(a)
        last = self.n_layers - 1
        z = a @ self.params[f"W{last}"] + self.params[f"b{last}"]
        p = sigmoid(z[:, 0])
        cache["p"] = p
        return p, cache

    def backward(self, cache, y):
        y = np.asarray(y, dtype=self.dtype)
        n = len(y)
        grads = {}
        dz = ((cache["p"] - y) / n)[:, None]
        for i in range(self.n_layers - 1, -1, -1):
            a_in = cache["a"][i]
            grads[f"W{i}"] = a_in.T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            if i == 0:
                break
            da = dz @ self.params[f"W{i}"].T
            mask = cache["masks"][i - 1]
            if mask is not None:
                da = da * mask
            # post-dropout activation is zero exactly where the relu was inactive
            dz = da * (cache["a"][i] > 0)
        return grads

    def describe(self) -> dict:
        return {"n_features": self.n_features, **asdict(self.config)}


# ---------------------------------------------------------------- LSTM

@dataclass
class LstmNetConfig:
    layers: int = 2
    units: int = 512
    window: int = 5


def _cell(zx, h_prev, c_prev, U, b):
    """LSTM step given the precomputed input projection ``zx = x @ W``."""
    z = zx + h_prev @ U + b
    H = h_prev.shape[-1]
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    o = sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (h_prev, c_prev, i, f, o, g, tc)


def lstm_cell_step(x_t, h_prev, c_prev, params):
    """One LSTM step. ``params`` holds ``W`` (F, 4H), ``U`` (H, 4H) and ``b`` (4H,)."""
    W, U, b = params["W"], params["U"], params["b"]
    H = U.shape[0]
    if W.shape[1] != 4 * H or U.shape[1] != 4 * H or b.shape[-1] != 4 * H:
        raise ValueError("inconsistent LSTM parameter shapes")
    if x_t.shape[-1] != W.shape[0] or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ValueError(f"input/state shapes {x_t.shape}, {h_prev.shape}, {c_prev.shape} "
                         f"do not match W {W.shape}, U {U.shape}")
    h, c, _ = _cell(x_t @ W, h_prev, c_prev, U, b)
    return h, c


class LstmNet:
    kind = "lstm"

    def __init__(self, n_features: int, config: LstmNetConfig | None = None, seed=0,
                 dtype=np.float32, params: dict | None = None):
        self.config = config or LstmNetConfig()
        self.n_features = n_features
        self.dtype = np.dtype(dtype)
        H = self.config.units
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            fan = n_features
            for layer in range(self.config.layers):
                params[f"W{layer}"] = _uniform(rng, (fan, 4 * H), fan, H, self.dtype)
                params[f"U{layer}"] = _uniform(rng, (H, 4 * H), H, H, self.dtype)
                b = np.zeros(4 * H, dtype=self.dtype)
                b[H:2 * H] = 1.0  # forget gate
                params[f"b{layer}"] = b
                fan = H
            params["w_out"] = _uniform(rng, (H, 1), H, 1, self.dtype)
            params["b_out"] = np.zeros(1, dtype=self.dtype)
        self.params = params

    def forward(self, X, train=False, rng=None):
        x = np.asarray(X, dtype=self.dtype)
        cfg = self.config
        if x.ndim != 3 or x.shape[2] != self.n_features:
            raise ValueError(f"expected (batch, window, {self.n_features}) input, got {x.shape}")
        B, T, _ = x.shape
        H = cfg.units
        inp = x
        caches = []
        for layer in range(cfg.layers):
            W, U, b = (self.params[f"{k}{layer}"] for k in "WUb")
            zx = (inp.reshape(B * T, -1) @ W).reshape(B, T, 4 * H)
            h = np.zeros((B, H), dtype=self.dtype)
            c = np.zeros((B, H), dtype=self.dtype)
            out = np.empty((B, T, H), dtype=self.dtype)
            steps = []
            for t in range(T):
                h, c, cc = _cell(zx[:, t], h, c, U, b)
                out[:, t] = h
                steps.append(cc)
            caches.append((inp, steps))
            inp = out
        h_top = inp[:, -1]
        p = sigmoid((h_top @ self.params["w_out"] + self.params["b_out"])[:, 0])
        return p, {"layers": caches, "h_top": h_top, "p": p}

    def backward(self, cache, y):
        cfg = self.config
        y = np.asarray(y, dtype=self.dtype)
        n = len(y)
        H = cfg.units
        grads = {}
        dz = ((cache["p"] - y) / n)[:, None]
        grads["w_out"] = cache["h_top"].T @ dz
        grads["b_out"] = dz.sum(axis=0)
        T = cache["layers"][0][0].shape[1]
        # gradient reaching each time step's hidden output from the layer above
        dh_in = np.zeros((n, T, H), dtype=self.dtype)
        dh_in[:, -1] = dz @ self.params["w_out"].T
        for layer in range(cfg.layers - 1, -1, -1):
            inp, steps = cache["layers"][layer]
            W, U = self.params[f"W{layer}"], self.params[f"U{layer}"]
            dU = np.zeros_like(U)
            dzs = np.empty((n, T, 4 * H), dtype=self.dtype)
            dh_next = np.zeros((n, H), dtype=self.dtype)
            dc_next = np.zeros((n, H), dtype=self.dtype)
            for t in range(T - 1, -1, -1):
                h_prev, c_prev, i, f, o, g, tc = steps[t]
                dh = dh_next + dh_in[:, t]
                do = dh * tc
                dc = dc_next + dh * o * (1 - tc * tc)
                dzg = np.concatenate([dc * g * i * (1 - i),
                                      dc * c_prev * f * (1 - f),
                                      do * o * (1 - o),
                                      dc * i * (1 - g * g)], axis=1)
                dzs[:, t] = dzg
                dU += h_prev.T @ dzg
                dh_next = dzg @ U.T
                dc_next = dc * f
            flat = dzs.reshape(n * T, 4 * H)
            grads[f"W{layer}"] = inp.reshape(n * T, -1).T @ flat
            grads[f"U{layer}"] = dU
            grads[f"b{layer}"] = flat.sum(axis=0)
            dh_in = (flat @ W.T).reshape(n, T, -1)
        return grads

    def describe(self) -> dict:
        return {"n_features": self.n_features, **asdict(self.config)}


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingDiverged(f"non-finite gradient for {name}: {bad} of {np.size(g)} "
                                   f"entries at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p -= step.astype(p.dtype, copy=False)


# ---------------------------------------------------------------- training

@dataclass
class TrainParams:
    lr: float = 1e-3
    batch: int = 256
    epochs: int = 50
    patience: int = 5
    seed: int = 0
    threshold: float = 0.5


@dataclass
class TrainResult:
    model: object
    loss_curve: list
    val_f1: list
    best_epoch: int


def train(model, X, y, X_val, y_val, hyper: TrainParams | None = None) -> TrainResult:
    """Mini-batch Adam with early stopping on validation F1.

    The returned model carries the parameters of the best validation epoch.
    """
    hyper = hyper or TrainParams()
    shuffle_seq, dropout_seq = np.random.SeedSequence([hyper.seed, 1]).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    state = AdamState(learning_rate=hyper.lr)
    y = np.asarray(y)
    n = len(y)
    best = (-1.0, 0, {k: v.copy() for k, v in model.params.items()})
    losses, val_f1 = [], []
    stale = 0
    for epoch in range(1, hyper.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch):
            idx = order[start: start + hyper.batch]
            p, cache = model.forward(X[idx], train=True, rng=dropout_rng)
            loss = bce_loss(p, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            total += loss * len(idx)
            adam_step(model.params, model.backward(cache, y[idx]), state)
        losses.append(total / n)
        p_val, _ = model.forward(X_val, train=False)
        score = f1_score(p_val, y_val, hyper.threshold)
        val_f1.append(score)
        log.debug("epoch %d loss %.4f val_f1 %.4f", epoch, losses[-1], score)
        if score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in model.params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    model.params = best[2]
    return TrainResult(model, losses, val_f1, best[1])


# ---------------------------------------------------------------- gradient checks

def numerical_gradient(model, X, y, name, eps=1e-5, dropout_seed=None):
    """Central finite differences of the mean BCE with respect to ``params[name]``.

    Uses the unclipped loss so it is comparable with the analytic gradient
    everywhere. With ``dropout_seed`` every evaluation replays the same masks.
    """
    y = np.asarray(y, dtype=np.float64)

    def loss():
        rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
        p, _ = model.forward(X, train=dropout_seed is not None, rng=rng)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))

    p_arr = model.params[name]
    grad = np.zeros(p_arr.shape)
    for idx in np.ndindex(p_arr.shape):
        orig = p_arr[idx]
        p_arr[idx] = orig + eps
        up = loss()
        p_arr[idx] = orig - eps
        down = loss()
        p_arr[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def gradient_check(model, X, y, eps=1e-5, dropout_seed=None, floor=1e-12) -> dict:
    """Relative error between analytic and numerical gradients per parameter.

    Per tensor: ``||a - n|| / max(||a|| + ||n||, floor)``. A tensor-wise norm
    keeps finite-difference roundoff on near-zero entries from dominating.
    """
    rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
    _, cache = model.forward(X, train=dropout_seed is not None, rng=rng)
    analytic = model.backward(cache, y)
    out = {}
    for name in model.params:
        num = numerical_gradient(model, X, y, name, eps, dropout_seed)
        a = np.asarray(analytic[name], dtype=np.float64)
        denom = max(np.linalg.norm(a) + np.linalg.norm(num), floor)
        out[name] = float(np.linalg.norm(a - num) / denom)
    return out
