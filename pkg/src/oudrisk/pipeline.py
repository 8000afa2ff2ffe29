"""Pipeline stages with manifests, hash-based skipping and failure quarantine.

Each stage owns ``<out>/<stage>/`` and writes ``manifest.json`` there listing
its inputs and outputs with sha256 digests, the stage seed, the package
version, a hash of the config sections it reads, and wall time. A stage whose
inputs, parameters and outputs all still match its manifest is skipped. A
stage that raises has its directory moved to ``<out>/failed/<stage>``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .artifact import ModelArtifact
from .codes import SkippedCodes, load_tables
from .cohort import Cohort, LabeledPatient, build_cohort, ingest, write_exclusion_report
from .config import PipelineConfig
from .evaluation import (PartSplit, average_importance, feature_groups, partitioned_evaluate,
                         permutation_importance, plan_parts, pooled_roc, prepare_part,
                         write_importance, write_metrics, write_roc, write_summary)
from .features import (FeatureMatrices, FeatureSpace, build_feature_space, featurize,
                       read_matrix, write_matrix)
from .impute import fit_imputer
from .metrics import auroc, confusion, prf1
from .models import fit_model, infer_mask, model_input, predict_proba, stratified_split
from .synth import generate

log = logging.getLogger(__name__)

STAGES = ("synth", "cohort", "featurize", "train", "evaluate", "importance")


class StageError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# ---------------------------------------------------------------- shared inputs

def patients_file(cfg: PipelineConfig) -> Path:
    return cfg.cohort_file or cfg.out / "synth" / "patients.jsonl"


def _tables(cfg):
    return load_tables(**{k: str(v) for k, v in cfg.tables.items()})


def _table_inputs(cfg):
    return [cfg.tables[k] for k in sorted(cfg.tables)]


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_labels(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return ([r["patient_id"] for r in rows], np.array([int(r["label"]) for r in rows]),
            np.array([r["split"] for r in rows]))


def load_cohort(cfg) -> Cohort:
    """Rebuild the selected cohort from the patient file and ``cohort.json``."""
    selection = json.loads((cfg.out / "cohort" / "cohort.json").read_text(encoding="utf-8"))
    records = {r.patient_id: r for r in ingest(patients_file(cfg))}
    pos, neg = [], []
    for row in selection["patients"]:
        lp = LabeledPatient(records[row["patient_id"]], row["label"], row["index"], row["age"])
        (pos if lp.label else neg).append(lp)
    return Cohort(pos, neg, selection["exclusions"])


def load_features(cfg):
    """(space, raw FeatureMatrices over the whole cohort) from the featurize stage."""
    d = cfg.out / "featurize"
    space = FeatureSpace.load(d / "space.json")
    ids, labels, _ = _read_labels(d / "labels.csv")
    seq = read_matrix(d / "all_seq.bin").astype(np.float64)
    static = read_matrix(d / "all_static.bin").astype(np.float64)
    mask = read_matrix(d / "all_mask.bin").astype(bool)
    return space, FeatureMatrices(seq, mask, static, labels, ids)


# ---------------------------------------------------------------- stages

def stage_synth(cfg, d):
    if cfg.synth is None:
        raise StageError("no [synth] section in the config")
    paths = generate(cfg.synth, d)
    return [paths["patients"], paths["truth"]]


def stage_cohort(cfg, d):
    tables = _tables(cfg)
    cohort = build_cohort(ingest(patients_file(cfg)), tables, cfg.cohort)
    rows = [{"patient_id": lp.patient_id, "label": lp.label, "index": lp.index, "age": lp.age}
            for lp in cohort.patients]
    out = d / "cohort.json"
    out.write_text(json.dumps({"patients": rows, "exclusions": cohort.exclusion_report,
                               "n_positive": len(cohort.positives),
                               "n_negative": len(cohort.negatives)}, sort_keys=True, indent=1),
                   encoding="utf-8")
    report = d / "exclusions.csv"
    write_exclusion_report(cohort.exclusion_report, report)
    return [out, report]


def _impute_rows(train_rows, test_rows, method, names):
    if not (np.isnan(train_rows).any() or np.isnan(test_rows).any()):
        return train_rows, test_rows, None
    model = fit_imputer(train_rows, method, names=names)
    return model.transform(train_rows), model.transform(test_rows), model


def stage_featurize(cfg, d):
    tables = _tables(cfg)
    cohort = load_cohort(cfg)
    space = build_feature_space(cohort, tables, cfg.features.min_prevalence)
    skipped = SkippedCodes()
    fm = featurize(cohort, space, tables, cfg.features.window, skipped)
    rng = np.random.default_rng(cfg.stage_seed("featurize"))
    tr, te = stratified_split(fm.labels, 1 - cfg.features.test_frac, rng)
    split = np.where(np.isin(np.arange(len(fm)), tr), "train", "test")
    names = space.slot_names()
    outputs = []

    def put(name, array):
        write_matrix(d / name, array)
        outputs.append(d / name)

    put("all_seq.bin", fm.seq)
    put("all_static.bin", fm.static)
    put("all_mask.bin", fm.mask)
    f = space.width
    a, b = fm.subset(tr), fm.subset(te)
    rows_a, rows_b, imp_seq = _impute_rows(a.seq[a.mask].reshape(-1, f),
                                           b.seq[b.mask].reshape(-1, f),
                                           cfg.features.impute, names)
    seq_a, seq_b = np.zeros_like(a.seq), np.zeros_like(b.seq)
    seq_a[a.mask], seq_b[b.mask] = rows_a, rows_b
    st_a, st_b, imp_static = _impute_rows(a.static, b.static, cfg.features.impute, names)
    put("train.bin", seq_a)
    put("test.bin", seq_b)
    put("train_static.bin", st_a)
    put("test_static.bin", st_b)
    for name, model in (("imputer_seq.json", imp_seq), ("imputer_static.json", imp_static)):
        if model is not None:
            model.save(d / name)
            outputs.append(d / name)
    space.save(d / "space.json")
    outputs.append(d / "space.json")
    _write_csv(d / "labels.csv", ("patient_id", "label", "split"),
               zip(fm.patient_ids, fm.labels.tolist(), split.tolist()))
    _write_csv(d / "skipped_codes.csv", ("system", "code", "count"), skipped.rows())
    outputs += [d / "labels.csv", d / "skipped_codes.csv"]
    return outputs


def _split_matrices(cfg, which):
    d = cfg.out / "featurize"
    seq = read_matrix(d / f"{which}.bin")
    static = read_matrix(d / f"{which}_static.bin")
    _, labels, split = _read_labels(d / "labels.csv")
    return FeatureMatrices(seq, infer_mask(seq), static, labels[split == which], [])


def stage_train(cfg, d):
    space = FeatureSpace.load(cfg.out / "featurize" / "space.json")
    train, test = _split_matrices(cfg, "train"), _split_matrices(cfg, "test")
    seed = cfg.stage_seed("train")
    outputs, rows = [], []
    for kind in cfg.run.models:
        X, mask = model_input(kind, train)
        art = fit_model(cfg.model_spec(kind), X, train.labels, space.fingerprint, seed=seed,
                        mask=mask, jobs=cfg.run.jobs)
        path = d / f"model_{kind}.oudm"
        art.save(path)
        outputs.append(path)
        Xt, mt = model_input(kind, test)
        p = predict_proba(art, Xt, mt, space.fingerprint)
        m = prf1(confusion(p, test.labels, cfg.evaluation.threshold))
        rows.append((kind, repr(m.precision), repr(m.recall), repr(m.f1),
                     repr(auroc(p, test.labels))))
    _write_csv(d / "test_metrics.csv", ("model", "precision", "recall", "f1", "auroc"), rows)
    return outputs + [d / "test_metrics.csv"]


def _protocol(cfg):
    return replace(cfg.evaluation, seed=cfg.stage_seed("evaluate"), impute=cfg.features.impute)


def stage_evaluate(cfg, d):
    space, data = load_features(cfg)
    protocol = _protocol(cfg)
    splits = plan_parts(data.labels, protocol)
    parts_dir = d / "parts"
    parts_dir.mkdir()
    outputs, results = [], []
    for kind in cfg.run.models:
        res = partitioned_evaluate(data, cfg.model_spec(kind), protocol, space.fingerprint,
                                   names=space.slot_names(), jobs=cfg.run.jobs, splits=splits)
        results.append(res)
        for r in res.runs:
            path = parts_dir / f"{kind}_part{r.split.part}_r{r.split.repeat}.oudm"
            r.artifact.save(path)
            outputs.append(path)
        write_roc(pooled_roc(res, data.labels), d / f"roc_{kind}.csv")
        outputs.append(d / f"roc_{kind}.csv")
    write_metrics(results, d / "metrics.csv")
    write_summary(results, d / "summary.csv")
    (d / "splits.json").write_text(json.dumps(
        [{"part": s.part, "repeat": s.repeat, "train": s.train.tolist(), "test": s.test.tolist()}
         for s in splits], sort_keys=True), encoding="utf-8")
    return outputs + [d / "metrics.csv", d / "summary.csv", d / "splits.json"]


def stage_importance(cfg, d):
    space, data = load_features(cfg)
    kind = cfg.run.importance_model
    protocol = _protocol(cfg)
    splits = [PartSplit(s["part"], s["repeat"], np.array(s["train"], dtype=np.int64),
                        np.array(s["test"], dtype=np.int64))
              for s in json.loads((cfg.out / "evaluate" / "splits.json").read_text())]
    groups = feature_groups(space)
    seed = cfg.stage_seed("importance")
    reports = []
    for s in splits:
        art = ModelArtifact.load(cfg.out / "evaluate" / "parts" /
                                 f"{kind}_part{s.part}_r{s.repeat}.oudm")
        _, test = prepare_part(data, s, protocol.impute, space.slot_names())
        X, mask = model_input(kind, test)
        reports.append(permutation_importance(
            art, X, test.labels, groups, mask=mask, repeats=protocol.importance_repeats,
            seed=seed + s.part, threshold=protocol.threshold, fingerprint=space.fingerprint))
    report = average_importance(reports)
    write_importance(report, d / "importance.csv", protocol.top_k)
    return [d / "importance.csv"]


def _stage_inputs(cfg, name) -> list:
    feat = cfg.out / "featurize"
    if name == "synth":
        return []
    if name == "cohort":
        return [patients_file(cfg)] + _table_inputs(cfg)
    if name == "featurize":
        return [patients_file(cfg), cfg.out / "cohort" / "cohort.json"] + _table_inputs(cfg)
    if name == "train":
        return [feat / n for n in ("space.json", "labels.csv", "train.bin", "test.bin",
                                   "train_static.bin", "test_static.bin")]
    raw = [feat / n for n in ("space.json", "labels.csv", "all_seq.bin", "all_static.bin",
                              "all_mask.bin")]
    if name == "evaluate":
        return raw
    ev = cfg.out / "evaluate"
    kind = cfg.run.importance_model
    # with no part artifacts yet, name the first one so it is reported missing
    parts = sorted((ev / "parts").glob(f"{kind}_part*.oudm")) or [ev / "parts" /
                                                                   f"{kind}_part0_r0.oudm"]
    return raw + [ev / "splits.json"] + parts


def _stage_params(cfg, name) -> dict:
    models = {k: asdict(cfg.model_spec(k)) for k in cfg.run.models}
    common = {"version": __version__}
    if name == "synth":
        return {**common, "synth": asdict(cfg.synth) if cfg.synth else None}
    if name == "cohort":
        return {**common, "cohort": asdict(cfg.cohort)}
    if name == "featurize":
        return {**common, "features": asdict(cfg.features), "seed": cfg.stage_seed(name)}
    if name == "train":
        return {**common, "models": models, "threshold": cfg.evaluation.threshold,
                "seed": cfg.stage_seed(name)}
    if name == "evaluate":
        return {**common, "models": models, "protocol": asdict(_protocol(cfg))}
    return {**common, "model": cfg.run.importance_model, "protocol": asdict(_protocol(cfg)),
            "seed": cfg.stage_seed(name)}


RUNNERS = {"synth": stage_synth, "cohort": stage_cohort, "featurize": stage_featurize,
           "train": stage_train, "evaluate": stage_evaluate, "importance": stage_importance}


# ---------------------------------------------------------------- runner

def _rel(cfg, path):
    return str(Path(path).resolve().relative_to(cfg.out))


def _digest_inputs(cfg, paths):
    out = {}
    for p in paths:
        if not Path(p).is_file():
            raise StageError(f"missing input {p}; run the stage that produces it first")
        key = _rel(cfg, p) if Path(p).resolve().is_relative_to(cfg.out) else str(Path(p).resolve())
        out[key] = sha256_file(p)
    return out


def _up_to_date(cfg, manifest_path, inputs, params_hash) -> bool:
    if not manifest_path.is_file():
        return False
    try:
        m = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return False
    if m.get("inputs") != inputs or m.get("params_hash") != params_hash:
        return False
    for rel, digest in m.get("outputs", {}).items():
        p = cfg.out / rel
        if not p.is_file() or sha256_file(p) != digest:
            return False
    return True


def quarantine(cfg, name) -> Path:
    src = cfg.out / name
    dest = cfg.out / "failed" / name
    if dest.exists():
        shutil.rmtree(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    if src.exists():
        shutil.move(str(src), str(dest))
    return dest


def run_stage(cfg: PipelineConfig, name: str, force: bool = False) -> dict:
    """Run one stage unless its manifest shows it is current; returns the manifest."""
    if name not in RUNNERS:
        raise StageError(f"unknown stage {name!r}")
    d = cfg.out / name
    manifest_path = d / "manifest.json"
    inputs = _digest_inputs(cfg, _stage_inputs(cfg, name))
    params = _stage_params(cfg, name)
    params_hash = _json_hash(params)
    if not force and _up_to_date(cfg, manifest_path, inputs, params_hash):
        log.info("%s: up to date, skipping", name)
        return json.loads(manifest_path.read_text(encoding="utf-8"))
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    t0 = time.perf_counter()
    log.info("%s: running", name)
    try:
        outputs = RUNNERS[name](cfg, d)
    except Exception as exc:
        dest = quarantine(cfg, name)
        raise StageError(f"stage {name} failed ({type(exc).__name__}: {exc}); "
                         f"partial outputs moved to {dest}") from exc
    manifest = {
        "stage": name, "version": __version__, "seed": params.get("seed", cfg.run.seed),
        "master_seed": cfg.run.seed, "params_hash": params_hash, "inputs": inputs,
        "outputs": {_rel(cfg, p): sha256_file(p) for p in outputs},
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
    log.info("%s: done in %.1fs", name, manifest["wall_time_s"])
    return manifest


def pipeline_stages(cfg) -> list:
    return [s for s in STAGES if s != "synth" or cfg.cohort_file is None]


def run_pipeline(cfg, force=False) -> list:
    return [run_stage(cfg, s, force) for s in pipeline_stages(cfg)]
