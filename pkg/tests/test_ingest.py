import datetime as dt
import logging
from pathlib import Path

import pytest

from adprog import ingest
from adprog.allpairs import transform_pairs
from adprog.cohort import DataError, Diagnosis, feature_group
from helpers import exam, record

FIXTURES = Path(__file__).parent / "fixtures"


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_two_patient_fixture():
    recs = ingest.parse_csv(FIXTURES / "two_patients.csv")
    assert [r.patient_id for r in recs] == ["11", "2"]
    assert [r.n_exams for r in recs] == [3, 3]
    p2 = recs[1]
    assert [e.diagnosis for e in p2.exams] == [Diagnosis.NL, Diagnosis.NL, Diagnosis.MCI]
    assert p2.exams[2].biomarkers["ADAS13"] == 14.33
    assert recs[0].exams[0].biomarkers["PTRACCAT"] == 1.0


def test_empty_cell_and_sentinel_become_absent():
    p11, p2 = ingest.parse_csv(FIXTURES / "two_patients.csv")
    assert "ADAS13" not in p2.exams[1].biomarkers
    assert "ADAS13" not in p11.exams[2].biomarkers  # -4 sentinel
    assert "Ventricles_ICV" not in p11.exams[1].biomarkers  # ICV was NA
    assert p11.exams[0].biomarkers["Ventricles_ICV"] == pytest.approx(42000 / 1600000)


def test_shuffled_rows_parse_identically():
    assert ingest.parse_csv(FIXTURES / "two_patients.csv") == ingest.parse_csv(FIXTURES / "two_patients_shuffled.csv")


def test_age_advances_with_exam_date():
    p2 = ingest.parse_csv(FIXTURES / "two_patients.csv")[1]
    first, last = p2.exams[0], p2.exams[2]
    days = (last.exam_date - first.exam_date).days
    assert last.biomarkers["AGE"] == pytest.approx(71.5 + days / 30.4375 / 12)
    flat = ingest.Schema(age_at_exam=False)
    assert ingest.parse_csv(FIXTURES / "two_patients.csv", flat)[1].exams[2].biomarkers["AGE"] == 71.5


def test_duplicate_patient_date_is_error_with_row(tmp_path):
    path = write(tmp_path, "RID,EXAMDATE,DX,COLPROT\n1,2010-01-01,NL,ADNI1\n1,2010-01-01,MCI,ADNI1\n")
    with pytest.raises(DataError, match="row 3"):
        ingest.parse_csv(path)


@pytest.mark.parametrize(
    "row, fragment",
    [
        ("1,notadate,NL,ADNI1,", "unparseable date"),
        ("1,2010-02-01,Confused,ADNI1,", "unrecognised diagnosis"),
        ("1,2010-02-01,NL,ADNI1,abc", "not numeric"),
    ],
)
def test_bad_cells_name_the_row(tmp_path, row, fragment):
    path = write(tmp_path, "RID,EXAMDATE,DX,COLPROT,MMSE\n1,2010-01-01,NL,ADNI1,29\n" + row + "\n")
    with pytest.raises(DataError, match=f"row 3: .*{fragment}"):
        ingest.parse_csv(path)


def test_missing_required_column(tmp_path):
    path = write(tmp_path, "RID,EXAMDATE,COLPROT\n1,2010-01-01,ADNI1\n")
    with pytest.raises(DataError, match="DX"):
        ingest.parse_csv(path)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        ingest.parse_csv(tmp_path / "nope.csv")


def test_absent_diagnosis_kept_as_source(tmp_path):
    path = write(tmp_path, "RID,EXAMDATE,DX,COLPROT\n1,2010-01-01,,ADNI1\n1,2010-06-01,MCI,ADNI1\n")
    (rec,) = ingest.parse_csv(path)
    assert rec.exams[0].diagnosis is None and rec.exams[1].diagnosis == Diagnosis.MCI


def test_unseen_race_warns_once(tmp_path, caplog):
    text = "RID,EXAMDATE,DX,COLPROT,PTRACCAT\n1,2010-01-01,NL,ADNI1,Martian\n1,2011-01-01,NL,ADNI1,Martian\n"
    with caplog.at_level(logging.WARNING):
        (rec,) = ingest.parse_csv(write(tmp_path, text))
    assert rec.exams[0].biomarkers["PTRACCAT"] == 7.0
    assert sum("Martian" in m for m in caplog.messages) == 1


def test_schema_from_config_maps_columns(tmp_path):
    cfg = write(tmp_path, "[columns]\npatient_id = PTID\nexam_date = VISDATE\nADAS13 = ADAS_13\n\n"
                          "[diagnosis]\nAlzheimer = DEMENTIA\n\n[missing]\nsentinels = -1, .\n", "schema.ini")
    csv_path = write(tmp_path, "PTID,VISDATE,DX,COLPROT,ADAS_13\nA,2010-01-01,Alzheimer,ADNI1,-1\nA,2010-02-01,NL,ADNI1,7\n")
    (rec,) = ingest.parse_csv(csv_path, ingest.Schema.from_config(cfg))
    assert rec.exams[0].diagnosis == Diagnosis.DEMENTIA
    assert "ADAS13" not in rec.exams[0].biomarkers and rec.exams[1].biomarkers["ADAS13"] == 7.0


def test_inspect_missingness_counts():
    table = {r["column"]: r for r in ingest.inspect_missingness(FIXTURES / "two_patients.csv")}
    assert table["ADAS13"]["n_missing"] == 2 and table["ADAS13"]["n_rows"] == 6
    assert table["ADAS13"]["fraction_missing"] == pytest.approx(2 / 6)
    assert table["DX"]["n_missing"] == 0


# -- split -----------------------------------------------------------------------


def three_patient_fixture():
    cont = record("cont", [exam(0, Diagnosis.NL), exam(200, Diagnosis.MCI), exam(900, Diagnosis.MCI), exam(1300, Diagnosis.DEMENTIA)],
                  ["ADNI1", "ADNI1", "ADNI2", "ADNI2"])
    early_only = record("early", [exam(0), exam(300)], ["ADNI1", "ADNI1"])
    demented = record("dem", [exam(0, Diagnosis.MCI), exam(300, Diagnosis.DEMENTIA), exam(900, Diagnosis.DEMENTIA)],
                      ["ADNI1", "ADNI1", "ADNIGO"])
    return [cont, early_only, demented]


def test_split_rules_by_hand():
    split = ingest.split_tadpole(three_patient_fixture())
    assert [r.patient_id for r in split.lb2] == ["cont"] == [r.patient_id for r in split.lb4]
    assert sorted(r.patient_id for r in split.lb1) == ["dem", "early"]
    assert split.lb2[0].n_exams == 2 and split.lb4[0].n_exams == 2
    assert max(e.exam_date for e in split.lb2[0].exams) < min(e.exam_date for e in split.lb4[0].exams)


def test_split_partitions_ids():
    recs = three_patient_fixture()
    split = ingest.split_tadpole(recs)
    lb1 = {r.patient_id for r in split.lb1}
    lb2 = {r.patient_id for r in split.lb2}
    assert lb2 == {r.patient_id for r in split.lb4}
    assert not lb1 & lb2 and len(lb1) + len(lb2) == len(recs)


def test_split_uses_last_diagnosed_early_exam():
    rec = record("x", [exam(0, Diagnosis.DEMENTIA), exam(100, None), exam(500, Diagnosis.DEMENTIA)], ["ADNI1", "ADNI1", "ADNI2"])
    assert [r.patient_id for r in ingest.split_tadpole([rec]).lb1] == ["x"]


# -- impute ------------------------------------------------------------------------


def test_forward_fill_example():
    rec = record("x", [exam(0, ADAS13=10.0), exam(100, ADAS13=None), exam(200, ADAS13=None)])
    (out,) = ingest.impute([rec], "forward-fill-then-drop")
    assert [e.biomarkers["ADAS13"] for e in out.exams] == [10.0, 10.0, 10.0]


def test_forward_fill_cannot_fill_first_visit():
    rec = record("x", [exam(0, ADAS13=None), exam(100, ADAS13=4.0)])
    (out,) = ingest.impute([rec], "forward-fill-then-drop")
    assert "ADAS13" not in out.exams[0].biomarkers


def test_impute_never_touches_present_values_or_diagnoses():
    rec = record("x", [exam(0, Diagnosis.MCI, MMSE=25.0), exam(100, None, MMSE=None), exam(200, Diagnosis.NL, MMSE=28.0)])
    (out,) = ingest.impute([rec], "forward-fill-then-drop")
    assert [e.diagnosis for e in out.exams] == [Diagnosis.MCI, None, Diagnosis.NL]
    assert [e.biomarkers["MMSE"] for e in out.exams] == [25.0, 25.0, 28.0]


def test_drop_row_keeps_three_pairs():
    exams = [exam(d * 100, Hippocampus=None if d in (1, 3) else 7000.0) for d in range(5)]
    recs = ingest.impute([record("x", exams)], "drop-row")
    assert len(transform_pairs(recs, feature_group("G8"))) == 3


def test_unknown_policy_rejected():
    with pytest.raises(ValueError):
        ingest.impute([], "mean")


# -- write / round trip ----------------------------------------------------------


def test_write_csv_round_trip(tmp_path):
    recs = ingest.parse_csv(FIXTURES / "two_patients.csv", ingest.Schema(icv=None))
    out = tmp_path / "out.csv"
    ingest.write_csv(recs, out)
    again = ingest.parse_csv(out)
    assert [r.patient_id for r in again] == [r.patient_id for r in recs]
    for a, b in zip(recs, again):
        assert a.phase_tags == b.phase_tags
        for ea, eb in zip(a.exams, b.exams):
            assert ea.exam_date == eb.exam_date and ea.diagnosis == eb.diagnosis
            assert ea.biomarkers.keys() == eb.biomarkers.keys()
            for k in ea.biomarkers:
                assert abs(ea.biomarkers[k] - eb.biomarkers[k]) <= 1e-12 * max(1.0, abs(ea.biomarkers[k]))


def test_dates_in_other_formats(tmp_path):
    path = write(tmp_path, "RID,EXAMDATE,DX,COLPROT\n1,03/15/2010,NL,ADNI1\n")
    assert ingest.parse_csv(path)[0].exams[0].exam_date == dt.date(2010, 3, 15)
