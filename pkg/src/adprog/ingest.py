"""Read TADPOLE-style longitudinal CSVs, impute, and split into LB1/LB2/LB4."""

from __future__ import annotations

import configparser
import csv
import datetime as dt
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from adprog.cohort import (
    FEATURE_UNIVERSE,
    OTHER_RACE_CODE,
    RACE_CODES,
    BIOMARKERS,
    VENTRICLES_ICV,
    DataError,
    Diagnosis,
    Examination,
    PatientRecord,
    age_at,
    encode_race,
)

log = logging.getLogger(__name__)

REQUIRED_ROLES = ("patient_id", "exam_date", "diagnosis", "phase")

DEFAULT_DIAGNOSIS_MAP: dict[str, Diagnosis] = {
    "nl": Diagnosis.NL,
    "cn": Diagnosis.NL,
    "normal": Diagnosis.NL,
    "mci": Diagnosis.MCI,
    "emci": Diagnosis.MCI,
    "lmci": Diagnosis.MCI,
    "dementia": Diagnosis.DEMENTIA,
    "ad": Diagnosis.DEMENTIA,
    "dem": Diagnosis.DEMENTIA,
    # ADNIMERGE conversion labels; the state after the arrow is the diagnosis.
    "nl to mci": Diagnosis.MCI,
    "nl to dementia": Diagnosis.DEMENTIA,
    "mci to dementia": Diagnosis.DEMENTIA,
    "mci to nl": Diagnosis.NL,
    "dementia to mci": Diagnosis.MCI,
    "dementia to nl": Diagnosis.NL,
    "0": Diagnosis.NL,
    "1": Diagnosis.MCI,
    "2": Diagnosis.DEMENTIA,
}

DEFAULT_SENTINELS = frozenset({"", "NA", "NaN", "-4"})
DATE_FORMATS = ("%Y-%m-%d", "%m/%d/%Y", "%d-%m-%Y", "%Y/%m/%d")

IMPUTE_POLICIES = ("forward-fill-then-drop", "drop-row")


@dataclass
class Schema:
    """Maps artifact column roles and features to CSV headers.

    ``biomarker_columns`` maps a registered feature name to its CSV header. When
    left empty every registered biomarker whose name appears in the header is used.
    """

    patient_id: str = "RID"
    exam_date: str = "EXAMDATE"
    diagnosis: str = "DX"
    phase: str = "COLPROT"
    icv: str | None = "ICV"
    biomarker_columns: dict[str, str] = field(default_factory=dict)
    diagnosis_map: dict[str, Diagnosis] = field(default_factory=lambda: dict(DEFAULT_DIAGNOSIS_MAP))
    race_codes: dict[str, int] = field(default_factory=lambda: dict(RACE_CODES))
    other_race_code: int = OTHER_RACE_CODE
    sentinels: frozenset[str] = DEFAULT_SENTINELS
    age_at_exam: bool = True

    def role_column(self, role: str) -> str:
        return getattr(self, role)

    @classmethod
    def from_config(cls, path: str | Path) -> "Schema":
        parser = read_config(path)
        return cls.from_parser(parser)

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser) -> "Schema":
        schema = cls()
        if parser.has_section("columns"):
            for key, value in parser.items("columns"):
                if key in REQUIRED_ROLES:
                    setattr(schema, key, value)
                elif key == "ICV":
                    schema.icv = value or None
                elif key in FEATURE_UNIVERSE:
                    schema.biomarker_columns[key] = value
                else:
                    raise DataError(f"config [columns]: unknown role or feature {key!r}")
        if parser.has_section("diagnosis"):
            for raw, target in parser.items("diagnosis"):
                try:
                    schema.diagnosis_map[raw.strip().lower()] = Diagnosis[target.strip().upper()]
                except KeyError:
                    raise DataError(f"config [diagnosis]: {target!r} is not one of NL, MCI, DEMENTIA") from None
        if parser.has_section("race"):
            schema.race_codes = {k: int(v) for k, v in parser.items("race")}
            if parser.has_option("options", "other_race_code"):
                schema.other_race_code = parser.getint("options", "other_race_code")
        if parser.has_option("missing", "sentinels"):
            raw = parser.get("missing", "sentinels")
            schema.sentinels = frozenset(s.strip() for s in raw.split(",")) | {""}
        if parser.has_option("options", "age_at_exam"):
            schema.age_at_exam = parser.getboolean("options", "age_at_exam")
        return schema


def read_config(path: str | Path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep header-name case
    parser.read(path, encoding="utf-8")
    return parser


def _parse_date(text: str) -> dt.date:
    text = text.strip()
    for fmt in DATE_FORMATS:
        try:
            return dt.datetime.strptime(text, fmt).date()
        except ValueError:
            continue
    raise ValueError(f"unparseable date {text!r}")


def _read_rows(path: Path) -> tuple[list[str], list[dict[str, str]]]:
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = list(reader.fieldnames or [])
            rows = list(reader)
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not header:
        raise DataError(f"{path}: empty file or missing header row")
    return header, rows


def _biomarker_columns(schema: Schema, header: Sequence[str]) -> dict[str, str]:
    if schema.biomarker_columns:
        missing = [col for col in schema.biomarker_columns.values() if col not in header]
        if missing:
            raise DataError(f"configured feature column(s) missing from CSV header: {missing}")
        return dict(schema.biomarker_columns)
    return {name: name for name in BIOMARKERS if name in header}


def parse_csv(path: str | Path, schema: Schema | None = None) -> list[PatientRecord]:
    """Group CSV rows into one PatientRecord per patient, sorted by patient_id.

    Sentinel cells become absent values, diagnosis strings are mapped through
    ``schema.diagnosis_map`` and race strings through ``schema.race_codes``.
    Row numbers in error messages count the header as row 1.
    """
    schema = schema or Schema()
    path = Path(path)
    header, rows = _read_rows(path)
    for role in REQUIRED_ROLES:
        if schema.role_column(role) not in header:
            raise DataError(f"{path}: required column {schema.role_column(role)!r} ({role}) not in header")
    columns = _biomarker_columns(schema, header)
    icv_col = schema.icv if schema.icv and schema.icv in header else None

    by_patient: dict[str, list[tuple[dt.date, dict, Diagnosis | None, str, int]]] = defaultdict(list)
    seen: dict[tuple[str, dt.date], int] = {}
    unseen_races: set[str] = set()
    for offset, row in enumerate(rows):
        rownum = offset + 2
        pid = (row.get(schema.patient_id) or "").strip()
        if pid in schema.sentinels:
            raise DataError(f"{path}: row {rownum}: missing patient id")
        try:
            date = _parse_date(row.get(schema.exam_date) or "")
        except ValueError as exc:
            raise DataError(f"{path}: row {rownum}: {exc}") from None
        if (pid, date) in seen:
            raise DataError(
                f"{path}: row {rownum}: duplicate exam for patient {pid} on {date} (first at row {seen[pid, date]})"
            )
        seen[pid, date] = rownum

        values: dict[str, float] = {}
        for name, col in columns.items():
            cell = (row.get(col) or "").strip()
            if cell in schema.sentinels:
                continue
            if name == "PTRACCAT":
                try:
                    values[name] = float(cell)
                    continue
                except ValueError:
                    pass
                code, known = encode_race(cell, schema.race_codes, schema.other_race_code)
                if not known and cell not in unseen_races:
                    unseen_races.add(cell)
                    log.warning("unseen race category %r mapped to code %d", cell, schema.other_race_code)
                values[name] = float(code)
                continue
            try:
                number = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {rownum}: column {col!r} value {cell!r} is not numeric") from None
            if not math.isfinite(number):
                continue
            values[name] = number
        if icv_col is not None and "Ventricles" in values:
            icv_cell = (row.get(icv_col) or "").strip()
            if icv_cell not in schema.sentinels:
                try:
                    icv = float(icv_cell)
                except ValueError:
                    raise DataError(f"{path}: row {rownum}: ICV value {icv_cell!r} is not numeric") from None
                if icv > 0:
                    values[VENTRICLES_ICV] = values["Ventricles"] / icv

        dx_cell = (row.get(schema.diagnosis) or "").strip()
        if dx_cell in schema.sentinels:
            diagnosis = None
        else:
            try:
                diagnosis = schema.diagnosis_map[dx_cell.lower()]
            except KeyError:
                raise DataError(f"{path}: row {rownum}: unrecognised diagnosis {dx_cell!r}") from None
        phase = (row.get(schema.phase) or "").strip()
        by_patient[pid].append((date, values, diagnosis, phase, rownum))

    records = []
    for pid in sorted(by_patient):
        visits = sorted(by_patient[pid], key=lambda v: v[0])
        if schema.age_at_exam:
            visits = _advance_age(visits)
        exams = tuple(Examination(d, vals, dx) for d, vals, dx, _, _ in visits)
        tags = tuple(v[3] for v in visits)
        records.append(PatientRecord(pid, exams, tags))
    return records


def _advance_age(visits):
    """Turn a per-row baseline AGE into age at each exam."""
    first_date = visits[0][0]
    out = []
    for date, values, dx, phase, rownum in visits:
        if "AGE" in values:
            values = dict(values)
            values["AGE"] = age_at(values["AGE"], first_date, date)
        out.append((date, values, dx, phase, rownum))
    return out


def inspect_missingness(path: str | Path, schema: Schema | None = None) -> list[dict]:
    """Per-column counts of absent cells for every mapped column."""
    schema = schema or Schema()
    path = Path(path)
    header, rows = _read_rows(path)
    cols = [schema.role_column(r) for r in REQUIRED_ROLES if schema.role_column(r) in header]
    cols += [c for c in _biomarker_columns(schema, header).values() if c not in cols]
    summary = []
    for col in cols:
        missing = sum(1 for row in rows if (row.get(col) or "").strip() in schema.sentinels)
        summary.append(
            {
                "column": col,
                "n_rows": len(rows),
                "n_missing": missing,
                "fraction_missing": missing / len(rows) if rows else 0.0,
            }
        )
    return summary


@dataclass(frozen=True)
class DatasetSplit:
    lb1: list[PatientRecord]
    lb2: list[PatientRecord]
    lb4: list[PatientRecord]


def split_tadpole(
    records: Iterable[PatientRecord],
    early_phase: str = "ADNI1",
    late_phases: Iterable[str] = ("ADNIGO", "ADNI2"),
) -> DatasetSplit:
    """Hold out patients who continued from ``early_phase`` into ``late_phases``.

    A patient is held out when they have early- and late-phase exams, every
    early exam predates every late one, and their last diagnosed early exam is
    not DEMENTIA. Exams from any other phase are dropped for held-out patients.
    """
    late = set(late_phases)
    lb1, lb2, lb4 = [], [], []
    for rec in records:
        early_idx = [i for i, tag in enumerate(rec.phase_tags) if tag == early_phase]
        late_idx = [i for i, tag in enumerate(rec.phase_tags) if tag in late]
        if early_idx and late_idx and max(early_idx) < min(late_idx):
            diagnosed = [rec.exams[i].diagnosis for i in early_idx if rec.exams[i].diagnosis is not None]
            if not diagnosed or diagnosed[-1] != Diagnosis.DEMENTIA:
                lb2.append(rec.subset(early_idx))
                lb4.append(rec.subset(late_idx))
                continue
        lb1.append(rec)
    return DatasetSplit(lb1, lb2, lb4)


def _forward_fill(record: PatientRecord) -> PatientRecord:
    carried: dict[str, float] = {}
    exams = []
    for exam in record.exams:
        carried.update(exam.biomarkers)
        if len(carried) == len(exam.biomarkers):
            exams.append(exam)
        else:
            exams.append(exam.replace_biomarkers(dict(carried)))
    return PatientRecord(record.patient_id, tuple(exams), record.phase_tags)


def impute(records: Sequence[PatientRecord], policy: str = "forward-fill-then-drop") -> list[PatientRecord]:
    """Apply an imputation policy. Diagnoses are never filled.

    ``drop-row`` leaves records untouched; exams lacking a group feature are
    then skipped by the All-Pairs transform. ``forward-fill-then-drop`` first
    carries each patient's most recent earlier value forward.
    """
    if policy == "drop-row":
        return list(records)
    if policy in ("forward-fill-then-drop", "forward-fill"):
        return [_forward_fill(r) for r in records]
    raise ValueError(f"unknown imputation policy {policy!r}; expected one of {IMPUTE_POLICIES}")


def write_csv(
    records: Sequence[PatientRecord],
    path: str | Path,
    baseline_ages: Mapping[str, float] | None = None,
) -> None:
    """Write records in the default schema layout.

    AGE is written as the age at each patient's first exam (the TADPOLE
    convention) so that ``parse_csv`` reconstructs per-exam ages. Pass
    ``baseline_ages`` to write exact baseline values instead of back-computing
    them from the first exam.
    """
    path = Path(path)
    names = list(BIOMARKERS)
    header = ["RID", "EXAMDATE", "DX", "COLPROT"] + names
    dx_label = {Diagnosis.NL: "NL", Diagnosis.MCI: "MCI", Diagnosis.DEMENTIA: "Dementia"}
    race_label = {code: name for name, code in RACE_CODES.items()}
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for rec in records:
            base_age = None
            if baseline_ages is not None:
                base_age = baseline_ages.get(rec.patient_id)
            elif "AGE" in rec.exams[0].biomarkers:
                base_age = rec.exams[0].biomarkers["AGE"]
            for exam, phase in zip(rec.exams, rec.phase_tags):
                row = [rec.patient_id, exam.exam_date.isoformat(), dx_label.get(exam.diagnosis, ""), phase]
                for name in names:
                    value = exam.biomarkers.get(name)
                    if value is None:
                        row.append("")
                    elif name == "PTRACCAT":
                        row.append(race_label.get(int(value), "Other"))
                    elif name == "AGE" and base_age is not None:
                        row.append(repr(base_age))
                    else:
                        row.append(repr(value))
                writer.writerow(row)


def records_by_id(records: Iterable[PatientRecord]) -> Mapping[str, PatientRecord]:
    return {r.patient_id: r for r in records}
