"""Feature space discovery and vectorization of encounters.

Slot layout per feature kind:

* ``binary``: one 0/1 slot (diagnosis categories, unvalued events, demographics)
* ``numeric``: one slot (medication quantity per ATC3, cumulative MME, lab count)
* ``triplet-portion``: (low, high, normal) share of a lab test's results
* ``triplet-minmedmax``: (min, median, max) of a valued clinical event

Only ``triplet-minmedmax`` slots can be missing (NaN); an encounter that never
measured the event has no value to report.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codes import (CodeError, CodeTables, SkippedCodes, convert_icd9, mme_of_order,
                    ndc_to_atc3, truncate_icd10)

CATEGORIES = ("diagnosis", "medication", "lab", "event", "demographic")
KIND_SLOTS = {"binary": 1, "numeric": 1, "triplet-portion": 3, "triplet-minmedmax": 3}
AGE_BUCKETS = 5
MME_FEATURE = "med:MME"
LAB_COUNT_FEATURE = "lab:n_tests"


def age_bucket(age: int) -> int:
    """18-27 -> 0, 28-37 -> 1, 38-47 -> 2, 48-57 -> 3, 58-66 -> 4."""
    if not 18 <= age <= 66:
        raise ValueError(f"age {age} outside the cohort range [18, 66]")
    return (age - 18) // 10


@dataclass(frozen=True)
class FeatureDescriptor:
    name: str
    category: str
    kind: str

    @property
    def width(self) -> int:
        return KIND_SLOTS[self.kind]


@dataclass
class FeatureSpace:
    descriptors: list
    prevalence: dict = field(default_factory=dict)
    min_prevalence: float = 0.01

    def __post_init__(self):
        self.offsets = {}
        self._by_name = {d.name: d for d in self.descriptors}
        pos = 0
        for d in self.descriptors:
            self.offsets[d.name] = pos
            pos += d.width
        self.width = pos

    def __len__(self):
        return len(self.descriptors)

    @property
    def names(self) -> list:
        return [d.name for d in self.descriptors]

    def slots(self, name: str) -> range:
        start = self.offsets[name]
        return range(start, start + KIND_SLOTS[self.descriptor(name).kind])

    def descriptor(self, name: str) -> FeatureDescriptor:
        return self._by_name[name]

    def kind_mask(self, *kinds) -> np.ndarray:
        m = np.zeros(self.width, dtype=bool)
        for d in self.descriptors:
            if d.kind in kinds:
                m[self.offsets[d.name]: self.offsets[d.name] + d.width] = True
        return m

    def slot_names(self) -> list:
        suffix = {"triplet-portion": ("low", "high", "normal"),
                  "triplet-minmedmax": ("min", "median", "max")}
        out = []
        for d in self.descriptors:
            if d.width == 1:
                out.append(d.name)
            else:
                out.extend(f"{d.name}[{s}]" for s in suffix[d.kind])
        return out

    @property
    def fingerprint(self) -> str:
        payload = json.dumps([[d.name, d.category, d.kind] for d in self.descriptors],
                             separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_json(self) -> dict:
        return {"fingerprint": self.fingerprint, "width": self.width,
                "min_prevalence": self.min_prevalence,
                "descriptors": [{"name": d.name, "category": d.category, "kind": d.kind}
                                for d in self.descriptors],
                "prevalence": {k: self.prevalence[k] for k in sorted(self.prevalence)}}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSpace":
        space = cls([FeatureDescriptor(**d) for d in obj["descriptors"]],
                    dict(obj.get("prevalence", {})), obj.get("min_prevalence", 0.01))
        if "fingerprint" in obj and obj["fingerprint"] != space.fingerprint:
            raise ValueError("space.json fingerprint does not match its descriptors")
        return space

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FeatureSpace":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- encounter parsing

@dataclass
class _Parsed:
    """Encounter contents keyed by feature name, independent of any space."""
    dx: set
    med_qty: dict
    mme: float
    labs: dict          # test -> Counter of flags
    n_labs: int
    event_values: dict  # code -> list of floats
    events_seen: set


def _parse(encounter, tables: CodeTables, skipped: SkippedCodes | None) -> _Parsed:
    dx = set()
    for code in encounter.diagnoses:
        for c10 in convert_icd9(code, tables, skipped):
            try:
                dx.add("dx:" + truncate_icd10(c10))
            except CodeError:
                if skipped is not None:
                    skipped.add("icd9", c10)
    med_qty: dict = defaultdict(float)
    mme = 0.0
    for order in encounter.med_orders:
        for atc in sorted(ndc_to_atc3(order.ndc, tables, skipped)):
            med_qty["med:" + atc] += order.quantity
        mme += mme_of_order(order, tables)
    labs: dict = defaultdict(Counter)
    for code, _value, flag in encounter.lab_results:
        labs["lab:" + code][flag] += 1
    values: dict = defaultdict(list)
    seen = set()
    for code, value in encounter.clinical_events:
        seen.add("evt:" + code)
        if value is not None:
            values["evt:" + code].append(value)
    return _Parsed(dx, dict(med_qty), mme, dict(labs), len(encounter.lab_results),
                   dict(values), seen)


def _demographic_names(lp) -> list:
    rec = lp.record
    return [f"demo:gender={rec.gender}", f"demo:race={rec.race_ethnicity}",
            f"demo:age={age_bucket(lp.age)}"]


def patient_feature_presence(lp, tables: CodeTables) -> tuple[set, set]:
    """Names of features present anywhere in a patient's history, and the valued events."""
    present, valued = set(), set()
    for enc in lp.feature_encounters:
        p = _parse(enc, tables, None)
        present |= p.dx
        present |= {k for k, q in p.med_qty.items() if q > 0}
        if p.mme > 0:
            present.add(MME_FEATURE)
        present |= set(p.labs)
        if p.n_labs:
            present.add(LAB_COUNT_FEATURE)
        present |= p.events_seen
        valued |= set(p.event_values)
    return present, valued


def build_feature_space(cohort, tables: CodeTables, min_prevalence: float = 0.01) -> FeatureSpace:
    positives = cohort.positives
    if not positives:
        raise ValueError("cannot build a feature space without positive patients")
    counts: Counter = Counter()
    observed, valued = set(), set()
    demographics = {f"demo:age={b}" for b in range(AGE_BUCKETS)}
    for lp in cohort.patients:
        present, val = patient_feature_presence(lp, tables)
        observed |= present
        valued |= val
        demo = _demographic_names(lp)
        demographics |= set(demo)
        if lp.label == 1:
            counts.update(present | set(demo))
    n_pos = len(positives)
    prevalence = {name: counts[name] / n_pos for name in observed | demographics}

    def category(name):
        return {"dx": "diagnosis", "med": "medication", "lab": "lab",
                "evt": "event", "demo": "demographic"}[name.split(":", 1)[0]]

    def kind(name):
        if name in (MME_FEATURE, LAB_COUNT_FEATURE) or name.startswith("med:"):
            return "numeric"
        if name.startswith("lab:"):
            return "triplet-portion"
        if name.startswith("evt:") and name in valued:
            return "triplet-minmedmax"
        return "binary"

    keep = [n for n in observed if prevalence[n] >= min_prevalence] + sorted(demographics)
    descriptors = sorted((FeatureDescriptor(n, category(n), kind(n)) for n in keep),
                         key=lambda d: (CATEGORIES.index(d.category), d.name))
    return FeatureSpace(descriptors, prevalence, min_prevalence)


# ---------------------------------------------------------------- vectorization

def _fill_demographics(vec, lp, space):
    for name in _demographic_names(lp):
        if name in space.offsets:
            vec[space.offsets[name]] = 1.0


def _fill_lab_defaults(vec, space):
    for d in space.descriptors:
        if d.kind == "triplet-portion":
            vec[space.offsets[d.name] + 2] = 1.0


def _fill_labs(vec, labs: dict, n_labs: int, space):
    for name, flags in labs.items():
        if name not in space.offsets:
            continue
        total = sum(flags.values())
        o = space.offsets[name]
        vec[o] = flags["LOW"] / total
        vec[o + 1] = flags["HIGH"] / total
        vec[o + 2] = flags["NORMAL"] / total
    if LAB_COUNT_FEATURE in space.offsets:
        vec[space.offsets[LAB_COUNT_FEATURE]] = n_labs


def _fill_events(vec, values: dict, seen: set, space):
    for d in space.descriptors:
        if d.category != "event":
            continue
        o = space.offsets[d.name]
        if d.kind == "binary":
            vec[o] = 1.0 if d.name in seen else 0.0
        elif d.name in values:
            v = values[d.name]
            vec[o: o + 3] = (min(v), float(np.median(v)), max(v))
        else:
            vec[o: o + 3] = np.nan


def _fill_codes(vec, dx, med_qty, mme, space):
    for name in dx:
        if name in space.offsets:
            vec[space.offsets[name]] = 1.0
    for name, q in med_qty.items():
        if name in space.offsets:
            vec[space.offsets[name]] += q
    if MME_FEATURE in space.offsets:
        vec[space.offsets[MME_FEATURE]] += mme


def vectorize_encounter(encounter, lp, space: FeatureSpace, tables: CodeTables,
                        skipped: SkippedCodes | None = None) -> np.ndarray:
    """One encounter as an F-vector; NaN marks unmeasured valued events.

    ``lp`` supplies the demographics (gender, race, age at first exposure).
    """
    vec = np.zeros(space.width)
    p = _parse(encounter, tables, skipped)
    _fill_codes(vec, p.dx, p.med_qty, p.mme, space)
    _fill_lab_defaults(vec, space)
    _fill_labs(vec, p.labs, p.n_labs, space)
    _fill_events(vec, p.event_values, p.events_seen, space)
    _fill_demographics(vec, lp, space)
    return vec


@dataclass
class SequenceSample:
    matrix: np.ndarray  # (window, F)
    mask: np.ndarray    # (window,) True for real encounters
    label: int
    patient_id: str


@dataclass
class StaticSample:
    vector: np.ndarray
    label: int
    patient_id: str


def assemble_sequence(lp, space: FeatureSpace, tables: CodeTables, window: int = 5,
                      skipped: SkippedCodes | None = None) -> SequenceSample:
    """Last ``window`` feature encounters, oldest first, left-padded with zero rows."""
    encs = lp.feature_encounters[-window:]
    matrix = np.zeros((window, space.width))
    mask = np.zeros(window, dtype=bool)
    start = window - len(encs)
    for i, enc in enumerate(encs):
        matrix[start + i] = vectorize_encounter(enc, lp, space, tables, skipped)
        mask[start + i] = True
    return SequenceSample(matrix, mask, lp.label, lp.patient_id)


def aggregate_static(lp, space: FeatureSpace, tables: CodeTables,
                     skipped: SkippedCodes | None = None) -> StaticSample:
    """Whole pre-index history pooled into one vector."""
    vec = np.zeros(space.width)
    dx, seen = set(), set()
    med_qty: dict = defaultdict(float)
    mme = 0.0
    labs: dict = defaultdict(Counter)
    n_labs = 0
    # min of per-encounter mins and max of maxes equal the pooled extremes
    pooled = defaultdict(list)
    for enc in lp.feature_encounters:
        p = _parse(enc, tables, skipped)
        dx |= p.dx
        seen |= p.events_seen
        for k, q in p.med_qty.items():
            med_qty[k] += q
        mme += p.mme
        for k, c in p.labs.items():
            labs[k].update(c)
        n_labs += p.n_labs
        for k, v in p.event_values.items():
            pooled[k].extend(v)
    _fill_codes(vec, dx, med_qty, mme, space)
    _fill_lab_defaults(vec, space)
    _fill_labs(vec, labs, n_labs, space)
    _fill_events(vec, dict(pooled), seen, space)
    _fill_demographics(vec, lp, space)
    return StaticSample(vec, lp.label, lp.patient_id)


# ---------------------------------------------------------------- datasets

@dataclass
class FeatureMatrices:
    """Per-patient matrices for one cohort, before imputation (NaN = missing)."""
    seq: np.ndarray      # (N, window, F)
    mask: np.ndarray     # (N, window) bool
    static: np.ndarray   # (N, F)
    labels: np.ndarray   # (N,) int
    patient_ids: list

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "FeatureMatrices":
        idx = np.asarray(idx)
        return FeatureMatrices(self.seq[idx], self.mask[idx], self.static[idx],
                               self.labels[idx], [self.patient_ids[i] for i in idx])


def featurize(cohort, space: FeatureSpace, tables: CodeTables, window: int = 5,
              skipped: SkippedCodes | None = None) -> FeatureMatrices:
    patients = cohort.patients
    n, f = len(patients), space.width
    seq = np.zeros((n, window, f))
    mask = np.zeros((n, window), dtype=bool)
    static = np.zeros((n, f))
    labels = np.zeros(n, dtype=np.int64)
    for i, lp in enumerate(patients):
        s = assemble_sequence(lp, space, tables, window, skipped)
        seq[i], mask[i] = s.matrix, s.mask
        static[i] = aggregate_static(lp, space, tables).vector
        labels[i] = lp.label
    return FeatureMatrices(seq, mask, static, labels, [p.patient_id for p in patients])


# ---------------------------------------------------------------- binary matrix files

MATRIX_MAGIC = b"OUDF1\0"


def write_matrix(path, array) -> None:
    """Row-major little-endian float32 with a (magic, ndim, dims) header."""
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(MATRIX_MAGIC)) != MATRIX_MAGIC:
            raise ValueError(f"{path}: not a feature matrix file")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: truncated matrix, expected shape {shape}")
    return data.reshape(shape).astype(np.float32)
