"""Seeded generator of ADNI-like longitudinal cohorts.

Each patient walks a monotone NL -> MCI -> DEMENTIA Markov chain at monthly
resolution, starting NL a random number of months before enrolment. Biomarkers
are a per-patient intercept plus state-dependent shifts and drifts, all in
units of the feature's measurement-noise sd, scaled by ``separability``. A
latent risk score (partly driven by APOE4) raises both the hazards and the
pre-symptomatic biomarker shift, which is what makes future conversions
predictable from present measurements.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from adprog.cohort import (
    DAYS_PER_MONTH,
    Diagnosis,
    Examination,
    PatientRecord,
    age_at,
)
from adprog.ingest import write_csv


@dataclass(frozen=True)
class TrendParams:
    baseline_mean: float
    baseline_sd: float
    noise_sd: float
    level: tuple[float, float, float]  # shift while in NL / MCI / DEMENTIA
    slope: tuple[float, float, float]  # drift per year spent in that state
    risk_loading: float = 0.0


DEFAULT_TRENDS: dict[str, TrendParams] = {
    "ADAS13": TrendParams(10.0, 0.9, 2.5, (0.0, 2.5, 6.0), (0.1, 0.6, 1.2), 1.8),
    "ADAS11": TrendParams(6.0, 0.6, 1.8, (0.0, 2.0, 5.0), (0.1, 0.5, 1.0), 1.5),
    "MMSE": TrendParams(29.0, 0.24, 1.0, (0.0, -1.5, -4.5), (0.0, -0.3, -1.0), -1.2),
    "FAQ": TrendParams(0.5, 0.24, 1.2, (0.0, 2.0, 7.0), (0.0, 0.5, 1.5), 1.2),
    "Ventricles": TrendParams(34000.0, 2700.0, 1500.0, (0.0, 1.5, 3.0), (0.2, 0.6, 1.0), 1.2),
    "Hippocampus": TrendParams(7300.0, 180.0, 250.0, (0.0, -2.0, -4.0), (-0.1, -0.4, -0.7), -1.8),
    "RAVLT_immediate": TrendParams(44.0, 1.8, 4.0, (0.0, -2.0, -3.5), (0.0, -0.3, -0.6), -1.5),
    "RAVLT_learning": TrendParams(5.5, 0.45, 1.4, (0.0, -1.2, -2.2), (0.0, -0.2, -0.3), -0.9),
    "RAVLT_forgetting": TrendParams(4.0, 0.45, 1.5, (0.0, 0.5, 0.8), (0.0, 0.1, 0.1), 0.6),
    "RAVLT_perc_forgetting": TrendParams(40.0, 3.6, 10.0, (0.0, 1.8, 3.5), (0.0, 0.3, 0.4), 1.2),
}

RACE_PROBS = (0.86, 0.06, 0.03, 0.01, 0.01, 0.02, 0.01)
APOE4_PROBS = (0.55, 0.35, 0.10)


@dataclass(frozen=True)
class CohortSpec:
    """Generator settings. The defaults form the "separable" cohort: strong,
    risk-driven hazard heterogeneity that is visible in the biomarkers, so
    future conversions are largely predictable from present measurements."""

    n_patients: int = 200
    visits: tuple[int, int] = (3, 10)
    interval_mean: float = 9.0  # months between visits
    interval_sd: float = 3.0
    nl_to_mci: float = 0.02  # monthly hazards at zero latent risk
    mci_to_dem: float = 0.05
    risk_hazard_effect: float = 8.0  # hazard multiplier exp(effect * (risk - typical APOE4 contribution))
    apoe4_risk: float = 0.5
    lead_in_months: int = 24
    separability: float = 2.0
    reversion_prob: float = 0.0
    missing_rate: float = 0.0
    baseline_age_mean: float = 73.0
    baseline_age_sd: float = 6.0
    enrol_start: str = "2005-01-01"
    enrol_span_months: int = 96
    phase_cutoff: str = "2010-01-01"
    early_phase: str = "ADNI1"
    late_phase: str = "ADNI2"
    trends: dict[str, TrendParams] = field(default_factory=lambda: dict(DEFAULT_TRENDS))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(int(v) for v in self.visits))
        lo, hi = self.visits
        if lo < 1 or hi < lo:
            raise ValueError(f"visits range must satisfy 1 <= min <= max, got {self.visits}")
        for name in ("nl_to_mci", "mci_to_dem", "reversion_prob", "missing_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.n_patients < 0 or self.interval_mean <= 0 or self.interval_sd < 0:
            raise ValueError("n_patients, interval_mean and interval_sd must be non-negative (mean positive)")
        trends = {k: v if isinstance(v, TrendParams) else TrendParams(**v) for k, v in self.trends.items()}
        for name, tp in trends.items():
            if tp.noise_sd < 0 or tp.baseline_sd < 0:
                raise ValueError(f"trend {name}: noise and baseline sd must be >= 0")
        object.__setattr__(self, "trends", trends)

    @classmethod
    def from_dict(cls, values: dict) -> "CohortSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown cohort spec keys: {sorted(unknown)}")
        values = dict(values)
        if "trends" in values:
            merged = dict(DEFAULT_TRENDS)
            for name, tp in values["trends"].items():
                base = asdict(merged[name]) if name in merged else {}
                base.update(tp)
                merged[name] = TrendParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in base.items()})
            values["trends"] = merged
        return cls(**values)

    @classmethod
    def from_json(cls, path: str | Path) -> "CohortSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _effective_hazard(h: float, multiplier: float) -> float:
    # keeps 0 -> 0 and 1 -> 1 for any positive multiplier
    return 1.0 - (1.0 - h) ** multiplier


@dataclass(frozen=True)
class PatientTruth:
    """Latent quantities behind one generated patient."""

    risk: float
    nl_to_mci: float  # effective monthly hazards for this patient
    mci_to_dem: float
    latent: tuple[int, ...]  # latent state at each visit


def _patient(spec: CohortSpec, index: int) -> tuple[PatientRecord, PatientTruth]:
    rng = np.random.default_rng([spec.seed, index])
    apoe4 = int(rng.choice(3, p=APOE4_PROBS))
    risk = float(rng.normal()) + spec.apoe4_risk * apoe4
    mult = float(np.exp(spec.risk_hazard_effect * (risk - spec.apoe4_risk * APOE4_PROBS[1])))
    h1 = _effective_hazard(spec.nl_to_mci, mult)
    h2 = _effective_hazard(spec.mci_to_dem, mult)

    lead_in = int(rng.integers(0, spec.lead_in_months + 1))
    n_visits = int(rng.integers(spec.visits[0], spec.visits[1] + 1))
    enrol = dt.date.fromisoformat(spec.enrol_start) + dt.timedelta(
        days=int(rng.integers(0, int(spec.enrol_span_months * DAYS_PER_MONTH) + 1))
    )
    offsets = [0]
    for _ in range(n_visits - 1):
        gap = max(1.0, rng.normal(spec.interval_mean, spec.interval_sd))
        offsets.append(offsets[-1] + max(1, int(round(gap * DAYS_PER_MONTH))))
    dates = [enrol + dt.timedelta(days=d) for d in offsets]
    visit_month = [lead_in + int(round(d / DAYS_PER_MONTH)) for d in offsets]

    # monthly chain; entered[s] is the month the patient entered state s
    state = 0
    entered = [0, None, None]
    states = []
    for month in range(visit_month[-1] + 1):
        if month > 0:
            u = rng.random()
            if state == 0 and u < h1:
                state, entered[1] = 1, month
            elif state == 1 and u < h2:
                state, entered[2] = 2, month
        states.append(state)

    age0 = float(rng.normal(spec.baseline_age_mean, spec.baseline_age_sd))
    race = int(rng.choice(len(RACE_PROBS), p=RACE_PROBS))
    intercepts = {name: tp.baseline_mean + tp.baseline_sd * rng.normal() for name, tp in spec.trends.items()}
    sep = spec.separability

    exams = []
    tags = []
    for date, month in zip(dates, visit_month):
        latent = states[month]
        years_in_state = (month - entered[latent]) / 12.0
        values: dict[str, float] = {}
        for name, tp in spec.trends.items():
            signal = tp.level[latent] + tp.slope[latent] * years_in_state + tp.risk_loading * risk
            values[name] = intercepts[name] + tp.noise_sd * (sep * signal + rng.normal())
        if spec.missing_rate > 0:
            drop = rng.random(len(spec.trends)) < spec.missing_rate
            for name, gone in zip(list(spec.trends), drop):
                if gone:
                    del values[name]
        values["AGE"] = age_at(age0, dates[0], date)
        values["APOE4"] = float(apoe4)
        values["PTRACCAT"] = float(race)
        observed = latent
        if spec.reversion_prob > 0 and latent > 0 and rng.random() < spec.reversion_prob:
            observed = latent - 1
        exams.append(Examination(date, values, Diagnosis(observed)))
        tags.append(spec.early_phase if date < dt.date.fromisoformat(spec.phase_cutoff) else spec.late_phase)
    width = max(4, len(str(spec.n_patients)))
    record = PatientRecord(f"S{index:0{width}d}", tuple(exams), tuple(tags))
    return record, PatientTruth(risk, h1, h2, tuple(states[m] for m in visit_month))


def generate(spec: CohortSpec) -> list[PatientRecord]:
    """Deterministic for a given ``spec.seed``; patients are independent sub-streams."""
    return [_patient(spec, i)[0] for i in range(spec.n_patients)]


def generate_with_truth(spec: CohortSpec) -> tuple[list[PatientRecord], dict[str, PatientTruth]]:
    pairs = [_patient(spec, i) for i in range(spec.n_patients)]
    return [p[0] for p in pairs], {p[0].patient_id: p[1] for p in pairs}


def transition_matrix(truth: PatientTruth, months: int) -> np.ndarray:
    """P(latent state after ``months`` monthly steps | state now), rows = now."""
    step = np.array(
        [
            [1 - truth.nl_to_mci, truth.nl_to_mci, 0.0],
            [0.0, 1 - truth.mci_to_dem, truth.mci_to_dem],
            [0.0, 0.0, 1.0],
        ]
    )
    return np.linalg.matrix_power(step, months)


def export_csv(records: list[PatientRecord], path: str | Path) -> None:
    """Write a cohort in the default ingest schema (AGE as baseline age)."""
    write_csv(records, path)


