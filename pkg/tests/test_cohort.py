import json
import random

import pytest

from oudrisk import codes
from oudrisk.cohort import (CohortConfig, EmptyCohortError, ParseError, build_cohort,
                            has_opioid_exposure, ingest, label_and_window)

OXY = {"ndc": "90001-0001-01", "quantity": 30}
IBU = {"ndc": "90002-0002-01", "quantity": 30}


@pytest.fixture(scope="module")
def tables():
    return codes.load_tables()


def enc(i, dx=(), meds=(), year=2012, **kw):
    return {"encounter_id": f"E{i}", "ts": f"{year}-01-{i + 1:02d}T08:00:00",
            "dx": list(dx), "meds": list(meds), **kw}


def patient(pid, encounters, birth_year=1970, **kw):
    return {"patient_id": pid, "gender": "F", "race": "white", "birth_year": birth_year,
            "encounters": encounters, **kw}


def write_jsonl(path, patients):
    path.write_text("".join(json.dumps(p) + "\n" for p in patients))
    return path


def records_from(tmp_path, patients):
    return ingest(write_jsonl(tmp_path / "p.jsonl", patients))


def test_ingest_two_patients_sorted(tmp_path):
    recs = records_from(tmp_path, [
        patient("B", [enc(3), enc(1), enc(2)]),
        patient("A", [enc(1)]),
    ])
    assert [r.patient_id for r in recs] == ["A", "B"]
    assert [e.encounter_id for e in recs[1].encounters] == ["E1", "E2", "E3"]


def test_ingest_tie_break_on_encounter_id(tmp_path):
    same = "2012-05-05T00:00:00"
    recs = records_from(tmp_path, [patient("A", [
        {"encounter_id": "E9", "ts": same}, {"encounter_id": "E10", "ts": same}])])
    assert [e.encounter_id for e in recs[0].encounters] == ["E10", "E9"]


def test_ingest_missing_timestamp_names_row(tmp_path):
    path = write_jsonl(tmp_path / "p.jsonl", [
        patient("A", [enc(1)]), patient("B", [{"encounter_id": "X7"}])])
    with pytest.raises(ParseError, match=r"p.jsonl:2.*X7"):
        ingest(path)


def test_ingest_malformed_line_number(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(json.dumps(patient("A", [enc(1)])) + "\n{not json\n")
    with pytest.raises(ParseError, match=r":2"):
        ingest(path)


def test_ingest_duplicate_encounter(tmp_path):
    path = write_jsonl(tmp_path / "p.jsonl", [patient("A", [enc(1), enc(1)])])
    with pytest.raises(ParseError, match="duplicate"):
        ingest(path)


def test_ingest_parses_payload(tmp_path):
    recs = records_from(tmp_path, [patient("A", [enc(
        1, dx=["M54.5"], meds=[OXY], labs=[{"code": "GLU", "value": 5.0, "flag": "high"}],
        events=[{"code": "TEMP", "value": 37.2}, {"code": "FALL"}])])])
    e = recs[0].encounters[0]
    assert e.diagnoses == ("M54.5",)
    assert e.med_orders[0].quantity == 30.0
    assert e.lab_results == (("GLU", 5.0, "HIGH"),)
    assert e.clinical_events == (("TEMP", 37.2), ("FALL", None))


def test_exposure_index(tmp_path, tables):
    recs = records_from(tmp_path, [
        patient("A", [enc(0, meds=[IBU]), enc(1, meds=[IBU]),
                      enc(2, meds=[{"ndc": "90001-0020-01", "quantity": 1}]),
                      enc(3), enc(4)]),
        patient("B", [enc(0, meds=[IBU]), enc(1)]),
        patient("C", [enc(0), enc(1, meds=[OXY]), enc(2), enc(3, meds=[OXY])]),
    ])
    assert has_opioid_exposure(recs[0], tables) == (2, 2012 - 1970)
    assert has_opioid_exposure(recs[1], tables) is None
    assert has_opioid_exposure(recs[2], tables)[0] == 1


def test_label_positive_window(tmp_path, tables):
    rec = records_from(tmp_path, [patient("A", [
        enc(0, meds=[OXY]), enc(1), enc(2), enc(3, dx=["F11.20"]), enc(4), enc(5)])])[0]
    lp = label_and_window(rec, tables)
    assert lp.label == 1 and lp.index == 3
    assert [e.encounter_id for e in lp.feature_encounters] == ["E0", "E1", "E2"]


def test_label_icd9_oud_code(tmp_path, tables):
    rec = records_from(tmp_path, [patient("A", [enc(0, meds=[OXY]), enc(1, dx=["304.00"])])])[0]
    assert label_and_window(rec, tables).label == 1


def test_label_negative_window(tmp_path, tables):
    rec = records_from(tmp_path, [patient("A", [enc(i, meds=[OXY]) for i in range(5)])])[0]
    lp = label_and_window(rec, tables)
    assert lp.label == 0 and lp.index == 4 and len(lp.feature_encounters) == 4


def test_label_oud_first_encounter_is_absent(tmp_path, tables):
    rec = records_from(tmp_path, [patient("A", [enc(0, dx=["F11.20"], meds=[OXY]), enc(1)])])[0]
    assert label_and_window(rec, tables) is None


@pytest.mark.parametrize("age,kept", [(17, False), (18, True), (66, True), (67, False)])
def test_age_boundaries(tmp_path, tables, age, kept):
    recs = records_from(tmp_path, [
        patient("A", [enc(0, meds=[OXY]), enc(1)], birth_year=2012 - age),
        patient("Z", [enc(0, meds=[OXY]), enc(1)], birth_year=1980)])
    cohort = build_cohort(recs, tables, CohortConfig())
    ids = [p.patient_id for p in cohort.patients]
    assert ("A" in ids) is kept
    assert cohort.exclusion_report["age"] == (0 if kept else 1)


def test_cancer_anywhere_excludes(tmp_path, tables):
    recs = records_from(tmp_path, [
        patient("A", [enc(0, meds=[OXY]), enc(1), enc(2, dx=["C50.919"])]),
        patient("B", [enc(0, meds=[OXY]), enc(1, dx=["174.9"])]),
        patient("Z", [enc(0, meds=[OXY]), enc(1)])])
    cohort = build_cohort(recs, tables)
    assert cohort.exclusion_report["cancer"] == 2
    assert [p.patient_id for p in cohort.patients] == ["Z"]


def test_empty_cohort_is_error(tmp_path, tables):
    recs = records_from(tmp_path, [patient("A", [enc(0), enc(1)])])
    with pytest.raises(EmptyCohortError):
        build_cohort(recs, tables)


def _random_fixture(seed, n=100):
    rnd = random.Random(seed)
    out = []
    for i in range(n):
        n_enc = rnd.randint(1, 6)
        encs = [enc(j, dx=[rnd.choice(["M54.5", "I10", "724.2"])]) for j in range(n_enc)]
        kind = rnd.random()
        if kind < 0.85:
            encs[rnd.randrange(n_enc)]["meds"].append(OXY)
        if rnd.random() < 0.08:
            encs[rnd.randrange(n_enc)]["dx"].append(rnd.choice(["C34.90", "162.9"]))
        if rnd.random() < 0.15:
            encs[rnd.randrange(n_enc)]["dx"].append(rnd.choice(["F11.20", "304.00", "F11.10"]))
        out.append(patient(f"P{i:03d}", encs, birth_year=2012 - rnd.randint(12, 75)))
    return out


def _scan(raw_patients):
    """Independent reimplementation of the selection rules over raw dicts."""
    oud = {"F1120", "F1110", "30400"}
    cancer = {"C3490", "1629"}
    kept_pos, kept_neg, dropped = [], [], 0
    for p in raw_patients:
        encs = p["encounters"]  # already in time order in this fixture
        first_opioid = next((j for j, e in enumerate(encs) if e["meds"]), None)
        dx = [[d.replace(".", "") for d in e["dx"]] for e in encs]
        if first_opioid is None or any(d in cancer for ds in dx for d in ds):
            dropped += 1
            continue
        if not 18 <= 2012 - p["birth_year"] <= 66:
            dropped += 1
            continue
        first_oud = next((j for j, ds in enumerate(dx) if any(d in oud for d in ds)), None)
        if first_oud == 0:
            dropped += 1
        elif first_oud is None:
            kept_neg.append(p["patient_id"])
        else:
            kept_pos.append(p["patient_id"])
    return kept_pos, kept_neg, dropped


def test_cohort_matches_independent_scan(tmp_path, tables):
    for seed in range(5):
        raw = _random_fixture(seed)
        recs = records_from(tmp_path, raw)
        cohort = build_cohort(recs, tables)
        pos, neg, dropped = _scan(raw)
        assert [p.patient_id for p in cohort.positives] == pos
        assert [p.patient_id for p in cohort.negatives] == neg
        assert sum(cohort.exclusion_report.values()) == dropped == 100 - len(pos) - len(neg)


def test_cohort_partition_and_no_leakage(tmp_path, tables):
    raw = _random_fixture(11)
    recs = records_from(tmp_path, raw)
    cohort = build_cohort(recs, tables)
    ids = [p.patient_id for p in cohort.positives + cohort.negatives]
    assert len(ids) == len(set(ids))
    assert len(ids) + sum(cohort.exclusion_report.values()) == len(recs)
    for p in cohort.positives:
        for e in p.feature_encounters:
            assert not any(tables.is_oud(d) for d in e.diagnoses)
            assert not any(tables.is_oud(c) for d in e.diagnoses
                           for c in codes.convert_icd9(d, tables))
    again = build_cohort(recs, tables)
    assert again.positives == cohort.positives and again.negatives == cohort.negatives
