"""Patient ingestion, cohort selection and labeling.

Input is a JSON-lines file, one patient object per line::

    {"patient_id": "P000001", "gender": "F", "race": "white", "birth_year": 1971,
     "encounters": [
        {"encounter_id": "E1", "ts": "2012-03-04T10:15:00",
         "dx": ["724.2", "F41.9"],
         "meds": [{"ndc": "90001-0001-01", "quantity": 30,
                   "ingredient": "oxycodone", "strength_mg": 5}],
         "labs": [{"code": "GLU", "value": 5.4, "flag": "NORMAL"}],
         "events": [{"code": "TEMP", "value": 37.1}, {"code": "FALL_RISK"}]}]}

``ingredient`` and ``strength_mg`` on a med are optional and fall back to the
NDC table. Lines for the same ``patient_id`` are merged.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from .codes import CodeTables, MedOrder, is_opioid_order, normalize_icd

log = logging.getLogger(__name__)

LAB_FLAGS = ("LOW", "NORMAL", "HIGH")
EXCLUSION_REASONS = ("no_opioid", "cancer", "age", "no_history")


class ParseError(ValueError):
    pass


class EmptyCohortError(RuntimeError):
    pass


@dataclass(frozen=True)
class Encounter:
    encounter_id: str
    timestamp: datetime
    diagnoses: tuple = ()
    med_orders: tuple = ()
    lab_results: tuple = ()       # (test_code, value, flag)
    clinical_events: tuple = ()   # (event_code, value or None)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    gender: str
    race_ethnicity: str
    birth_year: int
    encounters: tuple

    def __post_init__(self):
        if not self.encounters:
            raise ValueError(f"patient {self.patient_id} has no encounters")
        ts = [e.timestamp for e in self.encounters]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"encounters of {self.patient_id} are not time-ordered")


@dataclass(frozen=True)
class LabeledPatient:
    record: PatientRecord
    label: int
    index: int
    age: int  # at first opioid exposure

    @property
    def feature_encounters(self) -> tuple:
        return self.record.encounters[: self.index]

    @property
    def patient_id(self) -> str:
        return self.record.patient_id


@dataclass
class CohortConfig:
    min_age: int = 18
    max_age: int = 66


@dataclass
class Cohort:
    positives: list
    negatives: list
    exclusion_report: dict = field(default_factory=dict)

    @property
    def patients(self) -> list:
        return sorted(self.positives + self.negatives, key=lambda p: p.patient_id)


# ---------------------------------------------------------------- ingestion

def _parse_encounter(obj: dict, where: str) -> Encounter:
    eid = obj.get("encounter_id")
    if eid is None:
        raise ParseError(f"{where}: encounter without encounter_id")
    eid = str(eid)
    ts = obj.get("ts")
    if not ts:
        raise ParseError(f"{where}: encounter {eid} is missing its timestamp 'ts'")
    try:
        when = datetime.fromisoformat(ts)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: encounter {eid} has bad timestamp {ts!r}") from exc
    try:
        meds = tuple(
            MedOrder(ndc=str(m["ndc"]), quantity=float(m.get("quantity", 0.0)),
                     ingredient=m.get("ingredient"),
                     strength_mg_per_unit=(None if m.get("strength_mg") is None
                                           else float(m["strength_mg"])))
            for m in obj.get("meds", ()))
        labs = []
        for lab in obj.get("labs", ()):
            flag = str(lab["flag"]).upper()
            if flag not in LAB_FLAGS:
                raise ParseError(f"{where}: encounter {eid} lab flag {flag!r}")
            value = lab.get("value")
            labs.append((str(lab["code"]), None if value is None else float(value), flag))
        events = tuple(
            (str(ev["code"]), None if ev.get("value") is None else float(ev["value"]))
            for ev in obj.get("events", ()))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{where}: encounter {eid}: {exc!r}") from exc
    return Encounter(eid, when, tuple(str(d) for d in obj.get("dx", ())), meds,
                     tuple(labs), events)


def ingest(path) -> list[PatientRecord]:
    """Read a patients JSONL file into time-ordered records, sorted by patient id."""
    meta: dict[str, tuple] = {}
    encounters: dict[str, dict[str, Encounter]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
                pid = str(obj["patient_id"])
                info = (str(obj.get("gender", "U")), str(obj.get("race", "unknown")),
                        int(obj["birth_year"]))
                raw = obj.get("encounters", [])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{where}: malformed patient line ({exc})") from exc
            meta.setdefault(pid, info)
            bucket = encounters.setdefault(pid, {})
            for enc in raw:
                e = _parse_encounter(enc, where)
                if e.encounter_id in bucket:
                    raise ParseError(
                        f"{where}: duplicate encounter_id {e.encounter_id} for patient {pid}")
                bucket[e.encounter_id] = e
    records = []
    for pid in sorted(meta):
        encs = sorted(encounters[pid].values(), key=lambda e: (e.timestamp, e.encounter_id))
        if not encs:
            raise ParseError(f"{path}: patient {pid} has no encounters")
        gender, race, birth_year = meta[pid]
        records.append(PatientRecord(pid, gender, race, birth_year, tuple(encs)))
    return records


# ---------------------------------------------------------------- selection

def has_opioid_exposure(record: PatientRecord, tables: CodeTables):
    """(index of first encounter with an opioid order, age at that encounter) or None."""
    for i, enc in enumerate(record.encounters):
        if any(is_opioid_order(m, tables) for m in enc.med_orders):
            return i, enc.timestamp.year - record.birth_year
    return None


def _has_code(encounter: Encounter, pred) -> bool:
    return any(pred(d) for d in encounter.diagnoses)


def _code_matcher(tables: CodeTables, prefixes_of):
    # raw codes and their ICD-10 equivalents both count
    def match(code: str) -> bool:
        if prefixes_of(code):
            return True
        return any(prefixes_of(c) for c in tables.icd9_to_icd10.get(normalize_icd(code), ()))
    return match


def label_and_window(record: PatientRecord, tables: CodeTables, age: int = -1):
    """Label a record and locate its index encounter; None when a positive has no history."""
    is_oud = _code_matcher(tables, tables.is_oud)
    for i, enc in enumerate(record.encounters):
        if _has_code(enc, is_oud):
            if i == 0:
                return None
            return LabeledPatient(record, 1, i, age)
    return LabeledPatient(record, 0, len(record.encounters) - 1, age)


def build_cohort(records, tables: CodeTables, config: CohortConfig | None = None) -> Cohort:
    config = config or CohortConfig()
    is_cancer = _code_matcher(tables, tables.is_cancer)
    report = Counter({r: 0 for r in EXCLUSION_REASONS})
    positives, negatives = [], []
    for rec in records:
        exposure = has_opioid_exposure(rec, tables)
        if exposure is None:
            report["no_opioid"] += 1
            continue
        if any(_has_code(e, is_cancer) for e in rec.encounters):
            report["cancer"] += 1
            continue
        _, age = exposure
        if not config.min_age <= age <= config.max_age:
            report["age"] += 1
            continue
        labeled = label_and_window(rec, tables, age)
        if labeled is None:
            report["no_history"] += 1
            continue
        (positives if labeled.label else negatives).append(labeled)
    if not positives and not negatives:
        raise EmptyCohortError(f"cohort is empty after selection: {dict(report)}")
    positives.sort(key=lambda p: p.patient_id)
    negatives.sort(key=lambda p: p.patient_id)
    log.info("cohort: %d positive, %d negative, excluded %s",
             len(positives), len(negatives), dict(report))
    return Cohort(positives, negatives, dict(report))


def write_exclusion_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reason", "count"])
        for reason in EXCLUSION_REASONS:
            w.writerow([reason, report.get(reason, 0)])
