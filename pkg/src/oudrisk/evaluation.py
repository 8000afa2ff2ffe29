"""Partitioned evaluation protocol, permutation importance and result files.

Negatives are shuffled and cut into ``parts`` disjoint parts; each part joins
all positives and is split 80/20 by patient (stratified). Imputation is fit on
each part's training rows only.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMatrices
from .impute import fit_imputer
from .metrics import auroc, confusion, f1_score, prf1, roc_curve
from .models import (SCALE_MEAN, ModelSpec, fit_model, load_model, model_input, predict_proba,
                     stratified_split)

log = logging.getLogger(__name__)

METRIC_FIELDS = ("precision", "recall", "f1", "auroc")


class ProtocolError(RuntimeError):
    pass


@dataclass
class Protocol:
    parts: int = 10
    train_frac: float = 0.8
    repeats: int = 1
    threshold: float = 0.5
    seed: int = 0
    impute: str = "median"
    importance_repeats: int = 5
    top_k: int = 50


@dataclass
class PartSplit:
    part: int
    repeat: int
    train: np.ndarray  # indices into the cohort matrices
    test: np.ndarray


@dataclass
class RunResult:
    split: PartSplit
    counts: object
    precision: float
    recall: float
    f1: float
    auroc: float
    scores: np.ndarray
    artifact: object = None


@dataclass
class EvaluationResult:
    model: str
    runs: list
    summary: dict = field(default_factory=dict)

    def pooled(self) -> np.ndarray:
        return np.concatenate([r.scores for r in self.runs])


# ---------------------------------------------------------------- splitting

def partition_negatives(labels, parts, rng) -> list:
    neg = np.flatnonzero(np.asarray(labels) == 0)
    if len(neg) < parts:
        raise ProtocolError(f"{len(neg)} negatives cannot fill {parts} parts")
    size = len(neg) // parts
    dropped = len(neg) - size * parts
    if dropped:
        log.info("dropping %d negatives that do not fill a whole part", dropped)
    shuffled = neg[rng.permutation(len(neg))]
    return [np.sort(shuffled[i * size:(i + 1) * size]) for i in range(parts)]


def plan_parts(labels, protocol: Protocol) -> list:
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    negs = partition_negatives(labels, protocol.parts, np.random.default_rng([protocol.seed, 0]))
    splits = []
    for p, neg in enumerate(negs):
        members = np.union1d(pos, neg)
        for r in range(protocol.repeats):
            rng = np.random.default_rng([protocol.seed, 1, p, r])
            for attempt in range(2):
                tr, te = stratified_split(labels[members], protocol.train_frac, rng)
                if len(np.unique(labels[members[te]])) == 2:
                    break
                log.warning("part %d: single-class test split, redrawing", p)
            else:
                raise ProtocolError(f"part {p}: test split has a single class after redraw")
            splits.append(PartSplit(p, r, members[tr], members[te]))
    return splits


# ---------------------------------------------------------------- imputation

def _impute_pair(train, test, method, names=None):
    """Fit on ``train`` rows, fill both; a no-op when nothing is missing."""
    if not (np.isnan(train).any() or np.isnan(test).any()):
        return train, test
    model = fit_imputer(train, method, names=names)
    return model.transform(train), model.transform(test)


def prepare_part(data: FeatureMatrices, split: PartSplit, method: str, names=None):
    """Imputed (train, test) FeatureMatrices for one part."""
    tr, te = data.subset(split.train), data.subset(split.test)
    static_tr, static_te = _impute_pair(tr.static, te.static, method, names)
    f = data.seq.shape[-1]
    rows_tr, rows_te = tr.seq[tr.mask], te.seq[te.mask]
    rows_tr, rows_te = _impute_pair(rows_tr.reshape(-1, f), rows_te.reshape(-1, f), method, names)
    seq_tr, seq_te = np.zeros_like(tr.seq), np.zeros_like(te.seq)
    seq_tr[tr.mask], seq_te[te.mask] = rows_tr, rows_te
    return (FeatureMatrices(seq_tr, tr.mask, static_tr, tr.labels, tr.patient_ids),
            FeatureMatrices(seq_te, te.mask, static_te, te.labels, te.patient_ids))


# ---------------------------------------------------------------- protocol

def _run_part(data, spec, split, protocol, fingerprint, names, jobs):
    train, test = prepare_part(data, split, protocol.impute, names)
    X, mask = model_input(spec, train)
    seed = int(np.random.SeedSequence([protocol.seed, 2, split.part, split.repeat])
               .generate_state(1)[0])
    art = fit_model(spec, X, train.labels, fingerprint, seed=seed, mask=mask, jobs=jobs)
    Xt, mt = model_input(spec, test)
    scores = predict_proba(art, Xt, mt, fingerprint)
    counts = confusion(scores, test.labels, protocol.threshold)
    m = prf1(counts)
    return RunResult(split, counts, m.precision, m.recall, m.f1,
                     auroc(scores, test.labels), scores, art)


def partitioned_evaluate(data: FeatureMatrices, spec: ModelSpec, protocol: Protocol,
                         fingerprint: str, names=None, jobs: int = 1,
                         splits=None) -> EvaluationResult:
    splits = splits if splits is not None else plan_parts(data.labels, protocol)

    def one(split):
        r = _run_part(data, spec, split, protocol, fingerprint, names, 1)
        log.info("%s part %d: f1 %.4f auroc %.4f", spec.kind, split.part, r.f1, r.auroc)
        return r

    if jobs > 1 and len(splits) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(one, splits))
    else:
        runs = [one(s) for s in splits]
    summary = {k: float(np.mean([getattr(r, k) for r in runs])) for k in METRIC_FIELDS}
    return EvaluationResult(spec.kind, runs, summary)


def pooled_roc(result: EvaluationResult, labels) -> np.ndarray:
    """ROC over every run's test predictions pooled together."""
    labels = np.asarray(labels)
    y = np.concatenate([labels[r.split.test] for r in result.runs])
    return roc_curve(result.pooled(), y)


# ---------------------------------------------------------------- importance

@dataclass
class ImportanceReport:
    features: list
    baseline_f1: float
    permuted_f1: np.ndarray
    importance: np.ndarray
    repeats: int

    def ranked(self, top_k=None) -> list:
        """(rank, feature, f1_drop), largest drop first; ties keep feature order."""
        order = np.argsort(-self.importance, kind="stable")
        if top_k is not None:
            order = order[:top_k]
        return [(i + 1, self.features[j], float(self.importance[j]))
                for i, j in enumerate(order)]

    def rank_of(self, feature) -> int:
        for rank, name, _ in self.ranked():
            if name == feature:
                return rank
        raise KeyError(feature)


def _permuted(X, mask, slots, perm, neutral=None):
    """Copy of X with ``slots`` taken from patient ``perm[i]`` for every patient i.

    For sequences a donor's padded steps carry no value; where they land on a
    real step of the recipient they are filled with ``neutral`` (the training
    mean), and the recipient's own padded steps stay zero.
    """
    Xp = X.copy()
    donor = X[perm][..., slots]
    if mask is not None:
        donor[~mask[perm]] = neutral[slots] if neutral is not None else 0.0
    Xp[..., slots] = donor
    if mask is not None:
        Xp[~mask] = 0.0
    return Xp


def permutation_importance(artifact, X, labels, groups, mask=None, repeats: int = 5,
                           seed: int = 0, threshold: float = 0.5, fingerprint=None,
                           perms=None) -> ImportanceReport:
    """F1 drop after permuting each feature's slots across patients.

    ``groups`` maps feature name to its slot indices. For sequences the whole
    window column of a patient moves as a block. ``perms`` may fix the
    permutations (one list per feature) instead of drawing them.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    artifact.check(fingerprint)
    X = np.asarray(X)
    labels = np.asarray(labels)
    model = load_model(artifact)
    neutral = np.asarray(artifact.params[SCALE_MEAN], dtype=X.dtype) if mask is not None else None
    base = f1_score(predict_proba(artifact, X, mask, model=model), labels, threshold)
    names = list(groups)
    permuted = np.zeros(len(names))
    for k, name in enumerate(names):
        slots = list(groups[name])
        scores = []
        for r in range(repeats):
            if perms is not None:
                perm = perms[k][r]
            else:
                perm = np.random.default_rng([seed, k, r]).permutation(len(X))
            p = predict_proba(artifact, _permuted(X, mask, slots, perm, neutral), mask,
                              model=model)
            scores.append(f1_score(p, labels, threshold))
        permuted[k] = np.mean(scores)
    return ImportanceReport(names, base, permuted, base - permuted, repeats)


def average_importance(reports) -> ImportanceReport:
    """Mean of several reports over the same features (e.g. one per part)."""
    names = reports[0].features
    if any(r.features != names for r in reports):
        raise ValueError("reports cover different features")
    return ImportanceReport(names, float(np.mean([r.baseline_f1 for r in reports])),
                            np.mean([r.permuted_f1 for r in reports], axis=0),
                            np.mean([r.importance for r in reports], axis=0),
                            reports[0].repeats)


def feature_groups(space) -> dict:
    return {name: list(space.slots(name)) for name in space.names}


# ---------------------------------------------------------------- output files

def _fmt(x):
    return repr(float(x))


def write_metrics(results, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model", "part") + METRIC_FIELDS)
        for res in results:
            for r in res.runs:
                # repeat 0 keeps the bare part index
                run = r.split.part if r.split.repeat == 0 else f"{r.split.part}.{r.split.repeat}"
                w.writerow([res.model, run] + [_fmt(getattr(r, k)) for k in METRIC_FIELDS])


def write_summary(results, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model",) + METRIC_FIELDS)
        for res in results:
            w.writerow([res.model] + [_fmt(res.summary[k]) for k in METRIC_FIELDS])


def write_roc(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr"))
        for fpr, tpr in curve:
            w.writerow((_fmt(fpr), _fmt(tpr)))


def write_importance(report: ImportanceReport, path, top_k=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "feature", "f1_drop"))
        for rank, name, drop in report.ranked(top_k):
            w.writerow((rank, name, _fmt(drop)))


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))

