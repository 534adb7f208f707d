"""Patients, examinations, diagnoses and the three training feature groups."""

from __future__ import annotations

import datetime as dt
import enum
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

DAYS_PER_MONTH = 30.4375


class DataError(ValueError):
    """Input data violates a structural requirement."""


class Diagnosis(enum.IntEnum):
    NL = 0
    MCI = 1
    DEMENTIA = 2

    @classmethod
    def decode(cls, code: int) -> "Diagnosis":
        return cls(int(code))

    def encode(self) -> int:
        return int(self)


CLASSES = (Diagnosis.NL, Diagnosis.MCI, Diagnosis.DEMENTIA)
CLASS_LABELS = ("NL", "MCI", "DEM")

# Registered biomarkers in canonical column order.
BIOMARKERS = (
    "ADAS13",
    "Ventricles",
    "AGE",
    "FAQ",
    "PTRACCAT",
    "Hippocampus",
    "APOE4",
    "MMSE",
    "ADAS11",
    "RAVLT_immediate",
    "RAVLT_learning",
    "RAVLT_forgetting",
    "RAVLT_perc_forgetting",
)
# Derived ratio; registered but not part of any default group.
VENTRICLES_ICV = "Ventricles_ICV"
FEATURE_UNIVERSE = frozenset(BIOMARKERS) | {VENTRICLES_ICV}

DX_COLUMN = "DX"
TIME_COLUMN = "TimeDiff"

_G8 = ("DX", "ADAS13", "Ventricles", "AGE", "PTRACCAT", "Hippocampus", "APOE4", "TimeDiff")
_G11_EXTRA = ("FAQ", "MMSE", "ADAS11")
_G15_EXTRA = ("RAVLT_immediate", "RAVLT_learning", "RAVLT_forgetting", "RAVLT_perc_forgetting")
_CANONICAL_ORDER = ("DX",) + BIOMARKERS + ("TimeDiff",)


def _in_table_order(names: set[str]) -> tuple[str, ...]:
    return tuple(n for n in _CANONICAL_ORDER if n in names)


GROUP_FEATURES: dict[str, tuple[str, ...]] = {
    "G8": _in_table_order(set(_G8)),
    "G11": _in_table_order(set(_G8) | set(_G11_EXTRA)),
    "G15": _in_table_order(set(_G8) | set(_G11_EXTRA) | set(_G15_EXTRA)),
}

# ADNI PTRACCAT categories. Unseen strings map to OTHER_RACE_CODE.
RACE_CODES: dict[str, int] = {
    "White": 0,
    "Black": 1,
    "Asian": 2,
    "Am Indian/Alaskan": 3,
    "Hawaiian/Other PI": 4,
    "More than one": 5,
    "Unknown": 6,
}
OTHER_RACE_CODE = 7


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    feature_names: tuple[str, ...]

    @property
    def biomarkers(self) -> tuple[str, ...]:
        """The b_k columns: everything except the diagnosis and time columns."""
        return tuple(n for n in self.feature_names if n not in (DX_COLUMN, TIME_COLUMN))


def feature_group(name: str) -> FeatureGroup:
    try:
        names = GROUP_FEATURES[name]
    except KeyError:
        raise ValueError(f"unknown feature group {name!r}; expected one of {sorted(GROUP_FEATURES)}") from None
    return FeatureGroup(name, names)


def months_between(later: dt.date, earlier: dt.date) -> float:
    """Elapsed months as days / 30.4375. ``later`` must not precede ``earlier``."""
    days = (later - earlier).days
    if days < 0:
        raise ValueError(f"months_between: {later} is earlier than {earlier}")
    return days / DAYS_PER_MONTH


def age_at(baseline_age: float, baseline_date: dt.date, exam_date: dt.date) -> float:
    return baseline_age + months_between(exam_date, baseline_date) / 12.0


@dataclass(frozen=True, eq=True)
class Examination:
    exam_date: dt.date
    biomarkers: Mapping[str, float] = field(default_factory=dict)
    diagnosis: Diagnosis | None = None

    def __post_init__(self):
        if not isinstance(self.exam_date, dt.date):
            raise TypeError(f"exam_date must be a date, got {type(self.exam_date).__name__}")
        clean = {}
        for key, value in self.biomarkers.items():
            if key not in FEATURE_UNIVERSE:
                raise DataError(f"unregistered biomarker {key!r}")
            if value is None:
                continue
            value = float(value)
            if not math.isfinite(value):
                raise DataError(f"biomarker {key!r} has non-finite value {value}")
            clean[key] = value
        object.__setattr__(self, "biomarkers", MappingProxyType(clean))
        if self.diagnosis is not None:
            object.__setattr__(self, "diagnosis", Diagnosis(self.diagnosis))

    def has(self, names: Sequence[str]) -> bool:
        return all(n in self.biomarkers for n in names)

    def replace_biomarkers(self, biomarkers: Mapping[str, float]) -> "Examination":
        return Examination(self.exam_date, biomarkers, self.diagnosis)

    def __hash__(self):
        return hash((self.exam_date, tuple(sorted(self.biomarkers.items())), self.diagnosis))

    def __reduce__(self):
        # mappingproxy is not picklable; rebuild from a plain dict in worker processes
        return Examination, (self.exam_date, dict(self.biomarkers), self.diagnosis)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    exams: tuple[Examination, ...]
    phase_tags: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "exams", tuple(self.exams))
        tags = tuple(self.phase_tags) if self.phase_tags else ("",) * len(self.exams)
        object.__setattr__(self, "phase_tags", tags)
        if not self.exams:
            raise DataError(f"patient {self.patient_id}: record has no examinations")
        if len(tags) != len(self.exams):
            raise DataError(f"patient {self.patient_id}: {len(tags)} phase tags for {len(self.exams)} exams")
        for prev, cur in zip(self.exams, self.exams[1:]):
            if cur.exam_date <= prev.exam_date:
                raise DataError(
                    f"patient {self.patient_id}: exams not strictly increasing by date "
                    f"({prev.exam_date} then {cur.exam_date})"
                )

    @property
    def n_exams(self) -> int:
        return len(self.exams)

    def subset(self, indices: Sequence[int]) -> "PatientRecord":
        return PatientRecord(
            self.patient_id,
            tuple(self.exams[i] for i in indices),
            tuple(self.phase_tags[i] for i in indices),
        )


def encode_race(value: str, codes: Mapping[str, int] | None = None, other: int = OTHER_RACE_CODE) -> tuple[int, bool]:
    """Return (code, known). Unknown categories map to ``other``."""
    codes = RACE_CODES if codes is None else codes
    key = value.strip()
    if key in codes:
        return codes[key], True
    lowered = {k.lower(): v for k, v in codes.items()}
    if key.lower() in lowered:
        return lowered[key.lower()], True
    return other, False
