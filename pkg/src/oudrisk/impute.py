"""Missing-value imputation: median, mean, k-nearest-neighbour and MICE.

Every method is fit on training rows only and returns an :class:`ImputationModel`
that is reapplied unchanged to held-out rows. Observed values are never
modified.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

METHODS = ("median", "mean", "knn", "mice")


class ImputationError(ValueError):
    pass


@dataclass
class ImputationModel:
    method: str
    fill: np.ndarray                  # per-column statistic (initial values for mice)
    params: dict = field(default_factory=dict)
    donors: np.ndarray | None = None  # knn: reference rows
    scale: np.ndarray | None = None   # knn: per-column distance scale
    coefs: dict = field(default_factory=dict)  # mice: column -> (intercept, weights)
    final_delta: float = 0.0
    converged: bool = True

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.array(X, dtype=np.float64, copy=True)
        missing = np.isnan(X)
        if not missing.any():
            return X
        if self.method in ("median", "mean"):
            X[missing] = np.broadcast_to(self.fill, X.shape)[missing]
        elif self.method == "knn":
            X = _knn_fill(X, missing, self.donors, self.scale, self.fill,
                          int(self.params.get("k", 5)))
        elif self.method == "mice":
            X, _, _ = _mice_iterate(X, missing, self.fill, self.coefs,
                                    self.params.get("tol", 1e-3),
                                    int(self.params.get("max_iters", 10)))
        else:
            raise ImputationError(f"unknown method {self.method!r}")
        return X

    # serialization ----------------------------------------------------------------

    def to_json(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {"method": self.method, "fill": arr(self.fill), "params": self.params,
                "donors": arr(self.donors), "scale": arr(self.scale),
                "coefs": {str(j): [b0, arr(w)] for j, (b0, w) in sorted(self.coefs.items())},
                "final_delta": self.final_delta, "converged": self.converged}

    @classmethod
    def from_json(cls, obj: dict) -> "ImputationModel":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=np.float64)
        return cls(obj["method"], arr(obj["fill"]), dict(obj["params"]), arr(obj["donors"]),
                   arr(obj["scale"]),
                   {int(j): (b0, arr(w)) for j, (b0, w) in obj["coefs"].items()},
                   obj["final_delta"], obj["converged"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ImputationModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _column_stat(X, missing, method, binary, names):
    fill = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        obs = X[~missing[:, j], j]
        if obs.size == 0:
            name = names[j] if names is not None else f"column {j}"
            raise ImputationError(f"feature {name} has no observed training values")
        if binary is not None and binary[j]:
            # majority value; ties go to the smaller value
            vals, counts = np.unique(obs, return_counts=True)
            fill[j] = vals[np.argmax(counts)]
        elif method == "median":
            fill[j] = np.median(obs)
        else:
            fill[j] = obs.mean()
    return fill


def fit_imputer(X, method: str = "median", binary=None, names=None, k: int = 5,
                tol: float = 1e-3, max_iters: int = 10) -> ImputationModel:
    """Fit an imputation model on training rows ``X`` (NaN marks missing)."""
    if method not in METHODS:
        raise ImputationError(f"unknown imputation method {method!r}; choose from {METHODS}")
    X = np.asarray(X, dtype=np.float64)
    missing = np.isnan(X)
    stat = "median" if method == "median" else "mean"
    fill = _column_stat(X, missing, stat, binary, names)
    if method in ("median", "mean"):
        return ImputationModel(method, fill)
    if method == "knn":
        complete = X[~missing.any(axis=1)]
        donors = complete if len(complete) >= k else None
        if donors is None:
            # too few complete rows: keep every row and match per missing column
            log.warning("knn: %d complete rows < k=%d; using per-column donors",
                        len(complete), k)
            donors = X.copy()
        scale = np.nanstd(X, axis=0)
        scale[~(scale > 0)] = 1.0
        return ImputationModel("knn", fill, {"k": k}, donors=donors, scale=scale)
    # mice
    coefs: dict = {}
    start = np.where(missing, fill, X)
    Xf, delta, iters = _mice_fit(start, missing, tol, max_iters, coefs)
    converged = delta < tol
    if not converged:
        log.warning("MICE stopped after %d iterations with delta %.3g >= tol %.3g",
                    iters, delta, tol)
    return ImputationModel("mice", fill, {"tol": tol, "max_iters": max_iters},
                           coefs=coefs, final_delta=float(delta), converged=converged)


def impute(X, method: str = "median", **params):
    """Fit on ``X`` and return (completed X, model)."""
    model = fit_imputer(X, method, **params)
    return model.transform(X), model


# ---------------------------------------------------------------- knn

def _knn_fill(X, missing, donors, scale, fill, k):
    rows = np.flatnonzero(missing.any(axis=1))
    D = donors / scale
    D_obs = ~np.isnan(D)
    D0 = np.where(D_obs, D, 0.0)
    for start in range(0, len(rows), 256):
        chunk = rows[start: start + 256]
        Q = X[chunk] / scale
        q_obs = ~missing[chunk]
        Q0 = np.where(q_obs, Q, 0.0)
        # squared distance over slots observed in both the query and the donor
        both = q_obs.astype(float) @ D_obs.T.astype(float)
        d2 = ((Q0 ** 2) @ D_obs.T.astype(float) + q_obs.astype(float) @ (D0 ** 2).T
              - 2.0 * Q0 @ D0.T)
        d2 = np.maximum(d2, 0.0)
        d2 = np.where(both > 0, d2, np.inf)
        for r, i in enumerate(chunk):
            for j in np.flatnonzero(missing[i]):
                have = D_obs[:, j]
                cand = np.flatnonzero(have & np.isfinite(d2[r]))
                if cand.size == 0:
                    X[i, j] = fill[j]
                    continue
                # stable sort keeps ties in donor order
                nearest = cand[np.argsort(d2[r, cand], kind="stable")[:k]]
                X[i, j] = donors[nearest, j].mean()
    return X


# ---------------------------------------------------------------- mice

def _design(X, j):
    others = np.delete(X, j, axis=1)
    return np.column_stack([np.ones(len(X)), others])


def _mice_fit(X, missing, tol, max_iters, coefs):
    cols = [j for j in range(X.shape[1]) if missing[:, j].any()]
    delta, it = 0.0, 0
    for it in range(1, max_iters + 1):
        delta = 0.0
        for j in cols:
            obs, mis = ~missing[:, j], missing[:, j]
            A = _design(X, j)
            beta, *_ = np.linalg.lstsq(A[obs], X[obs, j], rcond=None)
            pred = A[mis] @ beta
            delta = max(delta, float(np.max(np.abs(pred - X[mis, j]))))
            X[mis, j] = pred
            coefs[j] = (float(beta[0]), beta[1:])
        if delta < tol:
            break
    return X, delta, it


def _mice_iterate(X, missing, fill, coefs, tol, max_iters):
    # columns missing only at apply time have no regression and keep the training mean
    X = np.where(missing, fill, X)
    cols = [j for j in sorted(coefs) if missing[:, j].any()]
    delta, it = 0.0, 0
    for it in range(1, max_iters + 1):
        delta = 0.0
        for j in cols:
            mis = missing[:, j]
            b0, w = coefs[j]
            pred = b0 + np.delete(X[mis], j, axis=1) @ w
            delta = max(delta, float(np.max(np.abs(pred - X[mis, j]))))
            X[mis, j] = pred
        if delta < tol:
            break
    return X, delta, it
