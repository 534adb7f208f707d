"""All-Pairs transform: every ordered pair (or triplet) of a patient's visits
becomes one training row, with elapsed time as a feature and the later visit's
diagnosis as the target.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from adprog.cohort import (
    DX_COLUMN,
    FEATURE_UNIVERSE,
    TIME_COLUMN,
    DataError,
    Examination,
    FeatureGroup,
    PatientRecord,
    months_between,
)

MODES = ("pairs", "triplets")


@dataclass(frozen=True)
class Provenance:
    patient_id: str
    source: tuple[int, ...]  # (j_a,) for pairs, (j_a, j_b) for triplets
    target: int


@dataclass
class TransformReport:
    candidates: int = 0
    emitted: int = 0
    skipped_no_target_dx: int = 0
    skipped_missing_features: int = 0


@dataclass
class TrainingMatrix:
    x: np.ndarray
    y: np.ndarray
    column_names: tuple[str, ...]
    provenance: list[Provenance]
    report: TransformReport = field(default_factory=TransformReport)

    def __post_init__(self):
        if not (len(self.x) == len(self.y) == len(self.provenance)):
            raise ValueError("x, y and provenance must have equal length")

    def __len__(self):
        return len(self.y)

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.provenance]

    def subset(self, rows: Sequence[int] | np.ndarray) -> "TrainingMatrix":
        rows = np.asarray(rows, dtype=int)
        return TrainingMatrix(
            self.x[rows],
            self.y[rows],
            self.column_names,
            [self.provenance[i] for i in rows],
        )


def pair_columns(group: FeatureGroup) -> tuple[str, ...]:
    return (TIME_COLUMN,) + group.biomarkers + (DX_COLUMN,)


def triplet_columns(group: FeatureGroup) -> tuple[str, ...]:
    b = group.biomarkers
    return (
        (f"{TIME_COLUMN}_bc", f"{TIME_COLUMN}_ab")
        + tuple(f"{n}_b" for n in b)
        + (f"{DX_COLUMN}_b",)
        + tuple(f"{n}_a" for n in b)
        + (f"{DX_COLUMN}_a",)
    )


def column_names(group: FeatureGroup, mode: str) -> tuple[str, ...]:
    if mode == "pairs":
        return pair_columns(group)
    if mode == "triplets":
        return triplet_columns(group)
    raise ValueError(f"unknown mode {mode!r}; expected 'pairs' or 'triplets'")


def _check_group(group: FeatureGroup) -> None:
    unknown = [n for n in group.biomarkers if n not in FEATURE_UNIVERSE]
    if unknown:
        raise DataError(f"feature group {group.name} has unregistered features {unknown}")


def usable(exam: Examination, group: FeatureGroup) -> bool:
    """An exam can feed a row when it has a diagnosis and every group biomarker."""
    return exam.diagnosis is not None and exam.has(group.biomarkers)


def _exam_block(exam: Examination, biomarkers: Sequence[str]) -> list[float]:
    return [exam.biomarkers[n] for n in biomarkers] + [float(exam.diagnosis)]


def _assemble(rows, targets, prov, columns, report) -> TrainingMatrix:
    x = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(columns))
    y = np.asarray(targets, dtype=np.int64)
    return TrainingMatrix(x, y, columns, prov, report)


def _transform(records: Sequence[PatientRecord], group: FeatureGroup, order: int) -> TrainingMatrix:
    _check_group(group)
    columns = pair_columns(group) if order == 2 else triplet_columns(group)
    b = group.biomarkers
    report = TransformReport()
    rows, targets, prov = [], [], []
    for rec in sorted(records, key=lambda r: r.patient_id):
        ok = [usable(e, group) for e in rec.exams]
        for idx in combinations(range(rec.n_exams), order):
            report.candidates += 1
            *src, tgt = idx
            target = rec.exams[tgt]
            if target.diagnosis is None:
                report.skipped_no_target_dx += 1
                continue
            if not all(ok[i] for i in idx):
                report.skipped_missing_features += 1
                continue
            if order == 2:
                (ja,) = src
                ea = rec.exams[ja]
                row = [months_between(target.exam_date, ea.exam_date)] + _exam_block(ea, b)
            else:
                ja, jb = src
                ea, eb = rec.exams[ja], rec.exams[jb]
                row = (
                    [months_between(target.exam_date, eb.exam_date), months_between(eb.exam_date, ea.exam_date)]
                    + _exam_block(eb, b)
                    + _exam_block(ea, b)
                )
            rows.append(row)
            targets.append(int(target.diagnosis))
            prov.append(Provenance(rec.patient_id, tuple(src), tgt))
            report.emitted += 1
    return _assemble(rows, targets, prov, columns, report)


def transform_pairs(records: Sequence[PatientRecord], group: FeatureGroup) -> TrainingMatrix:
    """One row per j_a < j_b: [months(j_a -> j_b), biomarkers(j_a), dx(j_a)] -> dx(j_b).

    Both exams must be usable (see ``usable``); rows are ordered by
    (patient_id, j_a, j_b).
    """
    return _transform(records, group, 2)


def transform_triplets(records: Sequence[PatientRecord], group: FeatureGroup) -> TrainingMatrix:
    """One row per j_a < j_b < j_c:
    [months(j_b -> j_c), months(j_a -> j_b), biomarkers(j_b), dx(j_b), biomarkers(j_a), dx(j_a)] -> dx(j_c).
    """
    return _transform(records, group, 3)


def transform(records: Sequence[PatientRecord], group: FeatureGroup, mode: str) -> TrainingMatrix:
    if mode == "pairs":
        return transform_pairs(records, group)
    if mode == "triplets":
        return transform_triplets(records, group)
    raise ValueError(f"unknown mode {mode!r}; expected 'pairs' or 'triplets'")


def build_prediction_vector(
    exam: Examination,
    t: float,
    group: FeatureGroup,
    mode: str = "pairs",
    prior_exam: Examination | None = None,
) -> np.ndarray:
    """Feature row asking "what is the diagnosis ``t`` months after ``exam``?"

    In triplet mode ``prior_exam`` plays the role of j_a and ``exam`` of j_b.
    """
    if not t > 0:
        raise ValueError(f"prediction horizon t must be positive, got {t}")
    _check_group(group)

    def block(e: Examination, which: str) -> list[float]:
        if e.diagnosis is None:
            raise DataError(f"{which} exam on {e.exam_date} has no diagnosis")
        missing = [n for n in group.biomarkers if n not in e.biomarkers]
        if missing:
            raise DataError(f"{which} exam on {e.exam_date} is missing feature {missing[0]!r}")
        return _exam_block(e, group.biomarkers)

    if mode == "pairs":
        return np.asarray([float(t)] + block(exam, "source"), dtype=np.float64)
    if mode == "triplets":
        if prior_exam is None:
            raise ValueError("triplet mode needs prior_exam")
        gap = months_between(exam.exam_date, prior_exam.exam_date)
        return np.asarray([float(t), gap] + block(exam, "source") + block(prior_exam, "prior"), dtype=np.float64)
    raise ValueError(f"unknown mode {mode!r}; expected 'pairs' or 'triplets'")


def write_matrix_csv(matrix: TrainingMatrix, path, provenance_path) -> None:
    """Matrix CSV (header = column names + "target") plus a provenance sidecar."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(matrix.column_names) + ["target"])
        for row, target in zip(matrix.x, matrix.y):
            w.writerow([format(v, ".17g") for v in row] + [int(target)])
    with open(provenance_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "source_indices", "target_index"])
        for p in matrix.provenance:
            w.writerow([p.patient_id, ";".join(str(i) for i in p.source), p.target])
