"""Uniform fit/score entry points over the five model kinds.

The LSTM consumes (N, window, F) sequences; the dense net and the baselines
consume the (N, F) static aggregate. Every model sees inputs divided by each
slot's maximum absolute training value, so binary and portion slots stay in
[0, 1] and padded steps stay zero. The scale, fit on training rows only (real
encounters for sequences), travels inside the artifact with the training mean,
which serves as the neutral value when a feature is blinded.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .artifact import KINDS, ModelArtifact
from .baselines import (ForestModel, ForestParams, LogRegModel, LogRegParams, TreeNode,
                        TreeParams, fit_forest, fit_logreg, fit_tree)
from .neural import DenseNet, DenseNetConfig, LstmNet, LstmNetConfig, TrainParams, train

SCALE_MEAN, SCALE = "input_mean", "input_scale"


@dataclass
class ModelSpec:
    kind: str = "lstm"
    lstm: LstmNetConfig = field(default_factory=LstmNetConfig)
    dense: DenseNetConfig = field(default_factory=DenseNetConfig)
    train: TrainParams = field(default_factory=TrainParams)
    logreg: LogRegParams = field(default_factory=LogRegParams)
    tree: TreeParams = field(default_factory=TreeParams)
    forest: ForestParams = field(default_factory=ForestParams)
    val_frac: float = 0.2  # carved from the training rows for early stopping

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {KINDS}")

    @property
    def sequential(self) -> bool:
        return self.kind == "lstm"


def stratified_split(labels, frac, rng):
    """Per-class shuffled split; returns sorted (first, second) index arrays.

    ``frac`` of each class goes to the first part, rounded, keeping at least one
    sample of each class on both sides when the class has two or more members.
    """
    labels = np.asarray(labels)
    first = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(frac * len(idx)))
        if len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        first.append(idx[:k])
    first = np.sort(np.concatenate(first))
    second = np.setdiff1d(np.arange(len(labels)), first)
    return first, second


def infer_mask(seq) -> np.ndarray:
    """Real encounters are never all-zero (demographic one-hots are always set)."""
    return np.any(np.asarray(seq) != 0, axis=2)


# ---------------------------------------------------------------- scaling

def fit_scaler(X, mask=None):
    """(mean, max |x|) per slot over training rows; zero scales become 1."""
    X = np.asarray(X, dtype=np.float64)
    rows = X[mask] if mask is not None else X
    scale = np.abs(rows).max(axis=0)
    scale[~(scale > 0)] = 1.0
    return rows.mean(axis=0).astype(np.float32), scale.astype(np.float32)


def apply_scaler(X, scale, mask=None) -> np.ndarray:
    out = np.asarray(X, dtype=np.float32) / scale
    if mask is not None:
        out[~np.asarray(mask, dtype=bool)] = 0.0
    return out


def model_input(spec_or_kind, data):
    """The matrix a kind consumes from FeatureMatrices, with its row mask."""
    kind = getattr(spec_or_kind, "kind", spec_or_kind)
    if kind == "lstm":
        return data.seq, data.mask
    return data.static, None


# ---------------------------------------------------------------- fitting

def fit_model(spec: ModelSpec, X, y, fingerprint: str, seed: int = 0, mask=None,
              jobs: int = 1) -> ModelArtifact:
    """Train ``spec.kind`` on already-imputed inputs and wrap it in an artifact."""
    X = np.asarray(X)
    y = np.asarray(y).astype(np.int64)
    if spec.sequential:
        if X.ndim != 3:
            raise ValueError(f"lstm expects (N, window, F) input, got {X.shape}")
        mask = infer_mask(X) if mask is None else np.asarray(mask, dtype=bool)
    elif X.ndim != 2:
        raise ValueError(f"{spec.kind} expects (N, F) input, got {X.shape}")
    mean, scale = fit_scaler(X, mask)
    Xs = apply_scaler(X, scale, mask)
    n_features = X.shape[-1]
    scaler = {SCALE_MEAN: mean, SCALE: scale}

    if spec.kind in ("lstm", "dense"):
        rng = np.random.default_rng([seed, 2])
        tr, va = stratified_split(y, 1.0 - spec.val_frac, rng)
        hyper = TrainParams(**{**asdict(spec.train), "seed": seed})
        if spec.kind == "lstm":
            net = LstmNet(n_features, spec.lstm, seed=seed)
        else:
            net = DenseNet(n_features, spec.dense, seed=seed)
        result = train(net, Xs[tr], y[tr], Xs[va], y[va], hyper)
        return ModelArtifact(spec.kind, {"model": net.describe(), "train": asdict(hyper)},
                             {**net.params, **scaler}, fingerprint, seed,
                             {"loss_curve": result.loss_curve, "val_f1": result.val_f1,
                              "best_epoch": result.best_epoch})
    if spec.kind == "logreg":
        params = LogRegParams(**{**asdict(spec.logreg), "seed": seed})
        m = fit_logreg(Xs, y, params)
        return ModelArtifact("logreg", {"model": {"n_features": n_features,
                                                  **asdict(params)}},
                             {"w": m.weights, "b": np.array([m.bias]), **scaler},
                             fingerprint, seed, {"loss_curve": m.loss_curve})
    if spec.kind == "tree":
        params = TreeParams(**{**asdict(spec.tree), "seed": seed})
        t = fit_tree(Xs, y, params)
        return ModelArtifact("tree", {"model": {"n_features": n_features, **asdict(params)}},
                             scaler, fingerprint, seed, {"n_nodes": t.n_nodes},
                             [t.to_json()])
    params = ForestParams(**{**asdict(spec.forest), "seed": seed})
    f = fit_forest(Xs, y, params, jobs=jobs)
    return ModelArtifact("forest", {"model": {"n_features": n_features, **asdict(params),
                                              "m": f.m}},
                         scaler, fingerprint, seed,
                         {"n_nodes": [t.n_nodes for t in f.trees]},
                         [t.to_json() for t in f.trees])


# ---------------------------------------------------------------- scoring

def load_model(artifact: ModelArtifact):
    """Rebuild the scoring object held by an artifact."""
    cfg = dict(artifact.config["model"])
    n_features = cfg.pop("n_features")
    p = {k: v for k, v in artifact.params.items() if k not in (SCALE_MEAN, SCALE)}
    if artifact.kind == "lstm":
        return LstmNet(n_features, LstmNetConfig(**cfg), params=p)
    if artifact.kind == "dense":
        cfg["hidden_dims"] = tuple(cfg["hidden_dims"])
        return DenseNet(n_features, DenseNetConfig(**cfg), params=p)
    if artifact.kind == "logreg":
        return LogRegModel(p["w"].astype(np.float64), float(p["b"][0]))
    trees = [TreeNode.from_json(t) for t in artifact.trees]
    if artifact.kind == "tree":
        return trees[0]
    return ForestModel(trees, [], cfg.get("m", 0), cfg.get("bootstrap", True))


def predict_proba(artifact: ModelArtifact, X, mask=None, fingerprint=None,
                  model=None) -> np.ndarray:
    """Eval-mode probabilities; refuses inputs built against another feature space.

    ``model`` may pass a cached ``load_model`` result to skip reconstruction.
    """
    artifact.check(fingerprint)
    X = np.asarray(X)
    if len(X) == 0:
        return np.zeros(0)
    n_features = artifact.config["model"]["n_features"]
    if X.shape[-1] != n_features:
        raise ValueError(f"input width {X.shape[-1]} != model width {n_features}")
    if artifact.kind == "lstm" and mask is None:
        mask = infer_mask(X)
    if artifact.kind != "lstm":
        mask = None
    Xs = apply_scaler(X, artifact.params[SCALE], mask)
    model = model or load_model(artifact)
    if artifact.kind in ("lstm", "dense"):
        p, _ = model.forward(Xs, train=False)
        return np.asarray(p, dtype=np.float64).ravel()
    return model.predict(Xs)
