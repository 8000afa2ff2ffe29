import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oudrisk import features as fe
from oudrisk.features import (FeatureSpace, age_bucket, aggregate_static, assemble_sequence,
                              build_feature_space, vectorize_encounter)

from conftest import make_cohort, make_encounter, make_patient

OXY = dict(ndc="90001-0001-01", quantity=30)        # 5 mg oxycodone -> 225 MME
MORPHINE = dict(ndc="90001-0020-01", quantity=30)   # 15 mg morphine -> 450 MME
ALPRAZOLAM = dict(ndc="90002-0003-01", quantity=20)


def small_cohort():
    pos = [
        make_patient("P1", [make_encounter(0, dx=["M54.5"], meds=[OXY],
                                           labs=[("GLU", 6.1, "HIGH")],
                                           events=[("TEMP", 37.0), ("TEMP", 38.0)]),
                            make_encounter(1, dx=["724.2", "I10"], meds=[MORPHINE])], label=1),
        make_patient("P2", [make_encounter(0, dx=["F41.9"], meds=[OXY, ALPRAZOLAM],
                                           events=[("FALL", None)])], label=1, age=18),
    ]
    neg = [make_patient("N1", [make_encounter(0, dx=["J06.9"], meds=[OXY]),
                               make_encounter(1, labs=[("NA", 140, "NORMAL")])], age=66,
                        gender="M", race="black")]
    return make_cohort(pos + neg)


@pytest.mark.parametrize("age,bucket", [(18, 0), (27, 0), (28, 1), (37, 1), (38, 2),
                                        (48, 3), (57, 3), (58, 4), (66, 4)])
def test_age_bucket(age, bucket):
    assert age_bucket(age) == bucket


@pytest.mark.parametrize("age", [17, 67])
def test_age_bucket_out_of_range(age):
    with pytest.raises(ValueError):
        age_bucket(age)


def test_space_layout_and_order(tables):
    space = build_feature_space(small_cohort(), tables, min_prevalence=0.0)
    cats = [d.category for d in space.descriptors]
    assert cats == sorted(cats, key=fe.CATEGORIES.index)
    for c in fe.CATEGORIES:
        names = [d.name for d in space.descriptors if d.category == c]
        assert names == sorted(names)
    assert space.width == sum(d.width for d in space.descriptors)
    assert space.descriptor("lab:GLU").kind == "triplet-portion"
    assert space.descriptor("evt:TEMP").kind == "triplet-minmedmax"
    assert space.descriptor("evt:FALL").kind == "binary"
    assert space.descriptor(fe.MME_FEATURE).kind == "numeric"
    # negative-only features still appear when the filter is off
    assert "dx:J06" in space.offsets and "lab:NA" in space.offsets


def test_prevalence_filter_default_drops_negative_only(tables):
    space = build_feature_space(small_cohort(), tables)
    assert "dx:J06" not in space.offsets
    assert space.prevalence["dx:J06"] == 0.0
    assert space.prevalence["dx:M54"] == 1.0 / 2
    # demographics bypass the filter, including unseen age buckets
    assert {f"demo:age={b}" for b in range(5)} <= set(space.offsets)
    assert "demo:gender=M" in space.offsets


def _prevalence_cohort(n_pos=200):
    """dx R42 in 1 of 200 positives (0.5%), dx R07 in 3 (1.5%), dx G43 in 2 (1.0%)."""
    pats = []
    for i in range(n_pos):
        dx = ["I10"]
        if i < 1:
            dx.append("R42")
        if i < 3:
            dx.append("R07.9")
        if i < 2:
            dx.append("G43.909")
        pats.append(make_patient(f"P{i:03d}", [make_encounter(0, dx=dx, meds=[OXY])], label=1))
    pats += [make_patient(f"N{i}", [make_encounter(0, dx=["R42"] * 1, meds=[OXY])])
             for i in range(20)]
    return make_cohort(pats)


def test_prevalence_filter_half_and_one_and_half_percent(tables):
    space = build_feature_space(_prevalence_cohort(), tables, min_prevalence=0.01)
    assert space.prevalence["dx:R42"] == pytest.approx(0.005)
    assert space.prevalence["dx:R07"] == pytest.approx(0.015)
    assert "dx:R42" not in space.offsets
    assert "dx:R07" in space.offsets
    assert "dx:G43" in space.offsets  # exactly 1% is kept


def test_prevalence_matches_brute_force(tables):
    cohort = _prevalence_cohort()
    space = build_feature_space(cohort, tables, min_prevalence=0.0)
    # independent count straight from the raw diagnosis strings
    raw_to_cat = {"I10": "I10", "R42": "R42", "R07.9": "R07", "G43.909": "G43"}
    counts = {}
    for p in cohort.positives:
        seen = {raw_to_cat[d] for e in p.feature_encounters for d in e.diagnoses}
        for c in seen:
            counts[c] = counts.get(c, 0) + 1
    for cat, n in counts.items():
        assert space.prevalence[f"dx:{cat}"] == n / len(cohort.positives)
    kept = {d.name for d in build_feature_space(cohort, tables).descriptors
            if d.category == "diagnosis"}
    assert kept == {f"dx:{c}" for c, n in counts.items() if n / 200 >= 0.01}


def test_zero_positives_is_error(tables):
    with pytest.raises(ValueError):
        build_feature_space(make_cohort([make_patient("N", [make_encounter(0)])]), tables)


@pytest.fixture()
def space(tables):
    return build_feature_space(small_cohort(), tables, min_prevalence=0.0)


def test_vectorize_lab_portions(space, tables):
    lp = small_cohort().positives[0]
    enc = make_encounter(0, labs=[("GLU", 1, "HIGH"), ("GLU", 1, "HIGH"),
                                  ("GLU", 1, "NORMAL"), ("GLU", 1, "LOW")])
    v = vectorize_encounter(enc, lp, space, tables)
    o = space.offsets["lab:GLU"]
    assert tuple(v[o:o + 3]) == (0.25, 0.5, 0.25)
    assert v[space.offsets[fe.LAB_COUNT_FEATURE]] == 4


def test_vectorize_no_labs_default(space, tables):
    lp = small_cohort().positives[0]
    v = vectorize_encounter(make_encounter(0), lp, space, tables)
    for d in space.descriptors:
        if d.kind == "triplet-portion":
            o = space.offsets[d.name]
            assert tuple(v[o:o + 3]) == (0.0, 0.0, 1.0)
    assert v[space.offsets[fe.LAB_COUNT_FEATURE]] == 0


def test_vectorize_event_min_median_max(space, tables):
    lp = small_cohort().positives[0]
    enc = make_encounter(0, events=[("TEMP", 37.0), ("TEMP", 38.2), ("TEMP", 37.5)])
    v = vectorize_encounter(enc, lp, space, tables)
    o = space.offsets["evt:TEMP"]
    assert tuple(v[o:o + 3]) == (37.0, 37.5, 38.2)


def test_vectorize_missing_event_is_nan(space, tables):
    lp = small_cohort().positives[0]
    v = vectorize_encounter(make_encounter(0), lp, space, tables)
    o = space.offsets["evt:TEMP"]
    assert np.isnan(v[o:o + 3]).all()
    assert np.isnan(v).sum() == 3  # only the valued event can be missing


def test_vectorize_codes_meds_demographics(space, tables):
    lp = small_cohort().positives[1]  # age 18, F, white
    enc = make_encounter(0, dx=["724.2", "UNKNOWN9"], meds=[OXY, OXY, ALPRAZOLAM])
    v = vectorize_encounter(enc, lp, space, tables)
    assert v[space.offsets["dx:M54"]] == 1.0
    assert v[space.offsets["dx:I10"]] == 0.0
    assert v[space.offsets["med:N02A"]] == 60
    assert v[space.offsets["med:N05B"]] == 20
    assert v[space.offsets[fe.MME_FEATURE]] == pytest.approx(2 * 30 * 5 * 1.5)
    assert v[space.offsets["demo:age=0"]] == 1 and v[space.offsets["demo:age=4"]] == 0
    assert v[space.offsets["demo:gender=F"]] == 1 and v[space.offsets["demo:gender=M"]] == 0
    assert v[space.offsets["demo:race=white"]] == 1


def _seq_patient(n):
    return make_patient("S", [make_encounter(i, dx=["I10"], meds=[dict(ndc="90001-0001-01",
                                                                      quantity=i + 1)])
                              for i in range(n)], label=1)


@pytest.mark.parametrize("n", [1, 2, 5, 8])
def test_assemble_sequence_windowing(space, tables, n):
    lp = _seq_patient(n)
    s = assemble_sequence(lp, space, tables, window=5)
    real = min(n, 5)
    assert s.mask.tolist() == [False] * (5 - real) + [True] * real
    assert not s.matrix[~s.mask].any()
    qty = s.matrix[s.mask, space.offsets["med:N02A"]]
    assert qty.tolist() == list(range(n - real + 1, n + 1))  # most recent last
    again = assemble_sequence(lp, space, tables, window=5)
    assert np.array_equal(again.matrix, s.matrix, equal_nan=True)


def test_aggregate_static(space, tables):
    lp = make_patient("A", [
        make_encounter(0, dx=["M54.5"], meds=[MORPHINE], labs=[("GLU", 1, "HIGH")],
                       events=[("TEMP", 37.0), ("TEMP", 39.0)]),
        make_encounter(1, meds=[MORPHINE], labs=[("GLU", 1, "LOW"), ("GLU", 1, "NORMAL")]),
        make_encounter(2, labs=[("GLU", 1, "HIGH")], events=[("TEMP", 36.5)]),
    ], label=1)
    v = aggregate_static(lp, space, tables).vector
    assert v[space.offsets["med:N02A"]] == 60
    assert v[space.offsets[fe.MME_FEATURE]] == 2 * 30 * 15
    assert v[space.offsets["dx:M54"]] == 1
    # pooled: 4 GLU results, 1 low, 2 high, 1 normal
    o = space.offsets["lab:GLU"]
    assert tuple(v[o:o + 3]) == (0.25, 0.5, 0.25)
    assert v[space.offsets[fe.LAB_COUNT_FEATURE]] == 4
    o = space.offsets["evt:TEMP"]
    assert tuple(v[o:o + 3]) == (36.5, 37.0, 39.0)


def _pool_by_hand(lp):
    """Brute-force pooling straight from encounter tuples."""
    flags, temps, qty = [], [], 0.0
    for e in lp.feature_encounters:
        flags += [f for c, _, f in e.lab_results if c == "GLU"]
        temps += [v for c, v in e.clinical_events if c == "TEMP" and v is not None]
        qty += sum(m.quantity for m in e.med_orders if m.ndc.startswith("90001"))
    n = len(flags)
    lab = ((flags.count("LOW") / n, flags.count("HIGH") / n, flags.count("NORMAL") / n)
           if n else (0.0, 0.0, 1.0))
    temp = (min(temps), float(np.median(temps)), max(temps)) if temps else None
    return lab, temp, qty


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(
    st.lists(st.sampled_from(["LOW", "HIGH", "NORMAL"]), max_size=4),
    st.lists(st.floats(35, 41, allow_nan=False), max_size=3),
    st.integers(0, 90)), min_size=1, max_size=6))
def test_static_pooling_matches_oracle(tables, encs):
    space = build_feature_space(small_cohort(), tables, min_prevalence=0.0)
    lp = make_patient("H", [
        make_encounter(i, labs=[("GLU", 1.0, f) for f in fl],
                       events=[("TEMP", t) for t in temps],
                       meds=[dict(ndc="90001-0001-01", quantity=q)] if q else [])
        for i, (fl, temps, q) in enumerate(encs)], label=1)
    v = aggregate_static(lp, space, tables).vector
    lab, temp, qty = _pool_by_hand(lp)
    o = space.offsets["lab:GLU"]
    assert tuple(v[o:o + 3]) == pytest.approx(lab, abs=1e-15)
    assert v[o:o + 3].sum() == pytest.approx(1.0, abs=1e-12)
    o = space.offsets["evt:TEMP"]
    if temp is None:
        assert np.isnan(v[o:o + 3]).all()
    else:
        assert tuple(v[o:o + 3]) == pytest.approx(temp, abs=1e-12)
    # additivity: static medication slot equals the sum of per-encounter slots
    per_enc = sum(vectorize_encounter(e, lp, space, tables)[space.offsets["med:N02A"]]
                  for e in lp.feature_encounters)
    assert v[space.offsets["med:N02A"]] == per_enc == qty


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["LOW", "HIGH", "NORMAL"]), max_size=12))
def test_lab_triplet_sums_to_one(tables, flags):
    space = build_feature_space(small_cohort(), tables, min_prevalence=0.0)
    lp = small_cohort().positives[0]
    v = vectorize_encounter(make_encounter(0, labs=[("GLU", 1.0, f) for f in flags]),
                            lp, space, tables)
    o = space.offsets["lab:GLU"]
    assert ((v[o:o + 3] >= 0) & (v[o:o + 3] <= 1)).all()
    assert v[o:o + 3].sum() == pytest.approx(1.0, abs=1e-12)


def test_featurize_widths_and_fingerprint(space, tables, tmp_path):
    cohort = small_cohort()
    m = fe.featurize(cohort, space, tables)
    assert m.seq.shape == (3, 5, space.width) and m.static.shape == (3, space.width)
    space.save(tmp_path / "space.json")
    again = FeatureSpace.load(tmp_path / "space.json")
    assert again.fingerprint == space.fingerprint and again.width == space.width
    other = build_feature_space(cohort, tables, min_prevalence=0.6)
    assert other.fingerprint != space.fingerprint


def test_matrix_roundtrip(tmp_path):
    a = np.arange(2 * 5 * 3, dtype=np.float32).reshape(2, 5, 3)
    a[0, 1, 2] = np.nan
    fe.write_matrix(tmp_path / "m.bin", a)
    b = fe.read_matrix(tmp_path / "m.bin")
    assert b.shape == a.shape and np.array_equal(a, b, equal_nan=True)
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:6] == b"OUDF1\0"
