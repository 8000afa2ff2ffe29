"""Classical comparators on the static aggregate: logistic regression, CART, random forest."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .neural import AdamState, TrainingDiverged, adam_step, bce_loss, sigmoid


def _check_width(X, n_features):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ValueError(f"expected (n, {n_features}) input, got {X.shape}")
    return X


# ---------------------------------------------------------------- logistic regression

@dataclass
class LogRegParams:
    l2: float = 1e-4
    lr: float = 0.05
    epochs: int = 500
    seed: int = 0


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    l2: float = 0.0
    loss_curve: list = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = _check_width(X, len(self.weights))
        return sigmoid(X @ self.weights + self.bias)


def fit_logreg(X, y, params: LogRegParams | None = None) -> LogRegModel:
    """Full-batch Adam on mean BCE + (l2 / 2) * ||w||^2. Starts from zero weights."""
    params = params or LogRegParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, f = X.shape
    theta = {"w": np.zeros(f), "b": np.zeros(1)}
    state = AdamState(learning_rate=params.lr)
    losses = []
    for _ in range(params.epochs):
        p = sigmoid(X @ theta["w"] + theta["b"][0])
        loss = bce_loss(p, y) + 0.5 * params.l2 * float(theta["w"] @ theta["w"])
        if not math.isfinite(loss):
            raise TrainingDiverged("logistic regression loss became non-finite")
        losses.append(loss)
        r = (p - y) / n
        adam_step(theta, {"w": X.T @ r + params.l2 * theta["w"], "b": np.array([r.sum()])},
                  state)
    return LogRegModel(theta["w"], float(theta["b"][0]), params.l2, losses)


# ---------------------------------------------------------------- CART

@dataclass
class TreeParams:
    max_depth: int = 16
    min_leaf: int = 20
    seed: int = 0


@dataclass
class TreeNode:
    """Flat preorder tree. ``feature == -1`` marks a leaf; a split's left child is i + 1."""
    feature: np.ndarray
    threshold: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(i + 1), walk(self.right[i]))
        return walk(0)

    def predict(self, X) -> np.ndarray:
        X = _check_width(X, self.n_features)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return self.value[node].astype(np.float64)
            r, n, fa = rows[active], node[active], f[active]
            go_left = X[r, fa] <= self.threshold[n]
            node[active] = np.where(go_left, n + 1, self.right[n])

    def path(self, x) -> list:
        """Node indices visited by one sample, root to leaf."""
        i, out = 0, [0]
        while self.feature[i] >= 0:
            i = i + 1 if x[self.feature[i]] <= self.threshold[i] else self.right[i]
            out.append(i)
        return out

    def to_json(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "right": self.right.tolist(), "value": self.value.tolist(),
                "n_features": self.n_features}

    @classmethod
    def from_json(cls, obj) -> "TreeNode":
        return cls(np.asarray(obj["feature"], dtype=np.int64),
                   np.asarray(obj["threshold"], dtype=np.float64),
                   np.asarray(obj["right"], dtype=np.int64),
                   np.asarray(obj["value"], dtype=np.float64), int(obj["n_features"]))


def gini(n_pos, n):
    return 0.0 if n == 0 else 2.0 * n_pos * (n - n_pos) / (n * n)


def best_split(X, y, idx, features, min_leaf):
    """(weighted child Gini, feature, threshold) of the best split, or None.

    Candidates are midpoints between consecutive distinct sorted values. Ties
    go to the lowest feature index, then the lowest threshold.
    """
    n = len(idx)
    yi = y[idx]
    best = None
    for f in features:
        x = X[idx, f]
        order = np.argsort(x, kind="stable")
        xs, ys = x[order], yi[order]
        cpos = np.cumsum(ys)
        n_pos = cpos[-1]
        i = np.arange(min_leaf - 1, n - min_leaf)
        if i.size == 0:
            continue
        i = i[xs[i] < xs[i + 1]]
        if i.size == 0:
            continue
        nl = (i + 1).astype(np.float64)
        nr = n - nl
        pl = cpos[i]
        pr = n_pos - pl
        weighted = (2.0 * pl * (nl - pl) / nl + 2.0 * pr * (nr - pr) / nr) / n
        k = int(np.argmin(weighted))
        if best is None or weighted[k] < best[0]:
            lo, hi = xs[i[k]], xs[i[k] + 1]
            thr = (lo + hi) / 2.0
            if not lo <= thr < hi:  # midpoint rounded onto the upper value
                thr = lo
            best = (float(weighted[k]), int(f), float(thr))
    return best


def _grow(X, y, idx, params, depth, out, feature_sampler):
    n = len(idx)
    n_pos = float(y[idx].sum())
    me = len(out["feature"])
    out["feature"].append(-1)
    out["threshold"].append(0.0)
    out["right"].append(-1)
    out["value"].append(n_pos / n)
    parent = gini(n_pos, n)
    if parent == 0.0 or depth >= params.max_depth or n < 2 * params.min_leaf:
        return
    split = best_split(X, y, idx, feature_sampler(), params.min_leaf)
    if split is None or parent - split[0] <= 1e-12:
        return
    _, f, thr = split
    left = idx[X[idx, f] <= thr]
    right = idx[X[idx, f] > thr]
    out["feature"][me] = f
    out["threshold"][me] = thr
    _grow(X, y, left, params, depth + 1, out, feature_sampler)
    out["right"][me] = len(out["feature"])
    _grow(X, y, right, params, depth + 1, out, feature_sampler)


def _fit_tree(X, y, idx, params, feature_sampler) -> TreeNode:
    out = {"feature": [], "threshold": [], "right": [], "value": []}
    _grow(X, y, idx, params, 0, out, feature_sampler)
    return TreeNode(np.asarray(out["feature"], dtype=np.int64),
                    np.asarray(out["threshold"], dtype=np.float64),
                    np.asarray(out["right"], dtype=np.int64),
                    np.asarray(out["value"], dtype=np.float64), X.shape[1])


def fit_tree(X, y, params: TreeParams | None = None) -> TreeNode:
    """Greedy CART on Gini impurity over all features."""
    params = params or TreeParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    everything = np.arange(X.shape[1])
    return _fit_tree(X, y, np.arange(len(y)), params, lambda: everything)


# ---------------------------------------------------------------- random forest

@dataclass
class ForestParams:
    n_trees: int = 100
    m: int | None = None  # features per split; None means ceil(sqrt(F))
    bootstrap: bool = True
    seed: int = 0
    max_depth: int = 16
    min_leaf: int = 20


@dataclass
class ForestModel:
    trees: list
    seeds: list
    m: int
    bootstrap: bool

    def predict(self, X) -> np.ndarray:
        if not self.trees:
            raise ValueError("empty forest")
        X = _check_width(X, self.trees[0].n_features)
        return np.mean([t.predict(X) for t in self.trees], axis=0)


def _tree_seed(seed, t):
    return np.random.SeedSequence([seed, t])


def fit_forest(X, y, params: ForestParams | None = None, jobs: int = 1) -> ForestModel:
    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, f = X.shape
    m = params.m or math.ceil(math.sqrt(f))
    m = min(m, f)
    tree_params = TreeParams(params.max_depth, params.min_leaf, params.seed)

    def one(t):
        rng = np.random.default_rng(_tree_seed(params.seed, t))
        idx = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        idx = np.sort(idx)

        def sampler():
            return np.sort(rng.choice(f, size=m, replace=False))
        return _fit_tree(X, y, idx, tree_params, sampler)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(one, range(params.n_trees)))
    else:
        trees = [one(t) for t in range(params.n_trees)]
    seeds = [int(_tree_seed(params.seed, t).generate_state(1)[0]) for t in range(params.n_trees)]
    return ForestModel(trees, seeds, m, params.bootstrap)


def predict(model, X) -> np.ndarray:
    return model.predict(X)
