import csv
from collections import Counter
from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adprog.allpairs import (
    build_prediction_vector,
    column_names,
    transform,
    transform_pairs,
    transform_triplets,
    write_matrix_csv,
)
from adprog.cohort import DataError, Diagnosis, feature_group
from helpers import brute_rows, exam, random_cohort, record

G8 = feature_group("G8")
G15 = feature_group("G15")


def cohort_of_lengths(lengths):
    return [record(f"P{i}", [exam(40 * j + i, Diagnosis(j % 3)) for j in range(n)]) for i, n in enumerate(lengths)]


def as_multiset(matrix):
    return Counter((tuple(row.tolist()), int(t)) for row, t in zip(matrix.x, matrix.y))


def test_single_patient_three_visits():
    m = transform_pairs(cohort_of_lengths([3]), G8)
    assert len(m) == 3
    assert [p.source + (p.target,) for p in m.provenance] == [(0, 1), (0, 2), (1, 2)]


def test_single_visit_gives_no_rows():
    assert len(transform_pairs(cohort_of_lengths([1]), G8)) == 0
    assert len(transform_triplets(cohort_of_lengths([2]), G8)) == 0


def test_pairs_cohort_4_2_5_matches_oracle():
    recs = cohort_of_lengths([4, 2, 5])
    m = transform_pairs(recs, G15)
    assert len(m) == 17
    assert as_multiset(m) == Counter(brute_rows(recs, G15, 2))


def test_triplets_cohort_5_4_matches_oracle():
    recs = cohort_of_lengths([5, 4])
    m = transform_triplets(recs, G15)
    assert len(m) == 14
    assert as_multiset(m) == Counter(brute_rows(recs, G15, 3))


def test_triplet_time_columns():
    e = [exam(0), exam(100), exam(250)]
    m = transform_triplets([record("p", e)], G8)
    assert len(m) == 1
    assert m.x[0, 0] == pytest.approx(150 / 30.4375) and m.x[0, 1] == pytest.approx(100 / 30.4375)


def test_pair_row_layout():
    e0 = exam(0, Diagnosis.MCI, ADAS13=17.0)
    m = transform_pairs([record("p", [e0, exam(365, Diagnosis.DEMENTIA)])], G8)
    row = dict(zip(m.column_names, m.x[0]))
    assert m.column_names == ("TimeDiff", "ADAS13", "Ventricles", "AGE", "PTRACCAT", "Hippocampus", "APOE4", "DX")
    assert row["TimeDiff"] == pytest.approx(365 / 30.4375)
    assert row["ADAS13"] == 17.0 and row["DX"] == 1.0 and m.y[0] == 2


@given(st.lists(st.integers(1, 10), min_size=1, max_size=12))
def test_count_law(lengths):
    recs = cohort_of_lengths(lengths)
    assert len(transform_pairs(recs, G8)) == sum(comb(n, 2) for n in lengths)
    assert len(transform_triplets(recs, G8)) == sum(comb(n, 3) for n in lengths)


@given(st.integers(0, 2**32 - 1))
def test_oracle_equivalence_with_missingness(seed):
    rng = np.random.default_rng(seed)
    recs = random_cohort(rng, int(rng.integers(1, 9)), 6, p_missing=0.05, p_no_dx=0.1)
    for order, mode in ((2, "pairs"), (3, "triplets")):
        m = transform(recs, G15, mode)
        assert as_multiset(m) == Counter(brute_rows(recs, G15, order))
        r = m.report
        assert r.emitted == len(m)
        assert r.candidates == r.emitted + r.skipped_no_target_dx + r.skipped_missing_features


@given(st.integers(0, 2**32 - 1))
def test_rows_are_causal_and_positive(seed):
    rng = np.random.default_rng(seed)
    recs = random_cohort(rng, 5, 6)
    by_id = {r.patient_id: r for r in recs}
    for mode in ("pairs", "triplets"):
        m = transform(recs, G8, mode)
        time_cols = 1 if mode == "pairs" else 2
        assert np.all(m.x[:, :time_cols] > 0)
        for p in m.provenance:
            idx = p.source + (p.target,)
            assert list(idx) == sorted(set(idx))
            dates = [by_id[p.patient_id].exams[i].exam_date for i in idx]
            assert dates == sorted(dates)
        assert np.all(np.isfinite(m.x))


def test_order_independent_of_input_order():
    recs = random_cohort(np.random.default_rng(1), 6, 5)
    a, b = transform_pairs(recs, G8), transform_pairs(recs[::-1], G8)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y) and a.provenance == b.provenance
    keys = [(p.patient_id, p.source, p.target) for p in a.provenance]
    assert keys == sorted(keys)


def test_target_without_diagnosis_skipped_and_counted():
    recs = [record("p", [exam(0), exam(100, None), exam(200)])]
    m = transform_pairs(recs, G8)
    assert len(m) == 1
    # (0,1) lacks a target diagnosis; (1,2) has an undiagnosed, hence unusable, source
    assert m.report.skipped_no_target_dx == 1 and m.report.skipped_missing_features == 1


def test_prediction_vector_pairs():
    v = build_prediction_vector(exam(0, Diagnosis.MCI), 12, G8)
    assert v.shape == (8,) and v[0] == 12 and v[-1] == 1.0


def test_prediction_vector_rejects_nonpositive_t():
    with pytest.raises(ValueError):
        build_prediction_vector(exam(0), 0, G8)


def test_prediction_vector_names_missing_feature():
    with pytest.raises(DataError, match="Hippocampus"):
        build_prediction_vector(exam(0, Hippocampus=None), 6, G8)


def test_triplet_vector_layout_matches_transform():
    e = [exam(0, Diagnosis.NL, ADAS13=5.0), exam(120, Diagnosis.MCI, ADAS13=9.0), exam(400, Diagnosis.DEMENTIA)]
    m = transform_triplets([record("p", e)], G15)
    t = (e[2].exam_date - e[1].exam_date).days / 30.4375
    v = build_prediction_vector(e[1], t, G15, "triplets", prior_exam=e[0])
    assert len(v) == len(column_names(G15, "triplets")) == m.x.shape[1]
    assert np.array_equal(v, m.x[0])


def test_matrix_csv_round_trip(tmp_path):
    recs = random_cohort(np.random.default_rng(3), 4, 5)
    m = transform_pairs(recs, G8)
    write_matrix_csv(m, tmp_path / "m.csv", tmp_path / "p.csv")
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(m.column_names) + ["target"]
    x = np.array([[float(v) for v in r[:-1]] for r in rows[1:]])
    assert np.max(np.abs(x - m.x)) <= 1e-12 * np.max(np.abs(m.x))
    assert [int(r[-1]) for r in rows[1:]] == m.y.tolist()
    with open(tmp_path / "p.csv") as fh:
        prov = list(csv.DictReader(fh))
    assert [(p["patient_id"], p["source_indices"], int(p["target_index"])) for p in prov] == [
        (p.patient_id, ";".join(map(str, p.source)), p.target) for p in m.provenance
    ]
