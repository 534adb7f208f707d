"""Builders and independent oracles shared by the test modules."""

from __future__ import annotations

import datetime as dt
from itertools import product

import numpy as np

from adprog import model
from adprog.cohort import Diagnosis, Examination, PatientRecord, BIOMARKERS

START = dt.date(2006, 1, 15)


def exam(day: int, dx=Diagnosis.NL, start: dt.date = START, **values) -> Examination:
    """Exam ``day`` days after ``start`` with every registered biomarker set unless overridden.

    Pass ``name=None`` to leave a feature absent.
    """
    full = {name: float(10 + i) for i, name in enumerate(BIOMARKERS)}
    full.update(values)
    return Examination(start + dt.timedelta(days=day), {k: v for k, v in full.items() if v is not None}, dx)


def record(pid: str, exams, phases=None) -> PatientRecord:
    exams = tuple(exams)
    return PatientRecord(pid, exams, tuple(phases) if phases else ("ADNI1",) * len(exams))


def random_cohort(rng: np.random.Generator, n_patients: int, max_visits: int, p_missing: float = 0.0,
                  p_no_dx: float = 0.0) -> list[PatientRecord]:
    """Random complete-or-holey records with distinct, strictly increasing dates."""
    out = []
    for i in range(n_patients):
        n = int(rng.integers(1, max_visits + 1))
        days = np.sort(rng.choice(np.arange(1, 3000), size=n, replace=False))
        exams = []
        for d in days:
            values = {name: float(np.round(rng.normal(20, 5), 3)) for name in BIOMARKERS}
            for name in BIOMARKERS:
                if rng.random() < p_missing:
                    values[name] = None
            dx = None if rng.random() < p_no_dx else Diagnosis(int(rng.integers(0, 3)))
            exams.append(exam(int(d), dx, **values))
        out.append(record(f"P{i:03d}", exams))
    return out


# -- independent oracles --------------------------------------------------------


def brute_rows(records, group, order: int) -> list[tuple[tuple[float, ...], int]]:
    """Nested-loop enumeration of All-Pairs rows as (features, target) tuples."""
    names = group.biomarkers

    def ok(e):
        return e.diagnosis is not None and all(n in e.biomarkers for n in names)

    def block(e):
        return [e.biomarkers[n] for n in names] + [float(int(e.diagnosis))]

    def months(a, b):
        return (a.exam_date - b.exam_date).days / 30.4375

    rows = []
    for rec in records:
        ex = rec.exams
        n = len(ex)
        for a in range(n):
            for b in range(a + 1, n):
                if order == 2:
                    if ok(ex[a]) and ok(ex[b]):
                        rows.append((tuple([months(ex[b], ex[a])] + block(ex[a])), int(ex[b].diagnosis)))
                    continue
                for c in range(b + 1, n):
                    if ok(ex[a]) and ok(ex[b]) and ok(ex[c]):
                        feats = [months(ex[c], ex[b]), months(ex[b], ex[a])] + block(ex[b]) + block(ex[a])
                        rows.append((tuple(feats), int(ex[c].diagnosis)))
    return rows


def brute_binary_auc(scores, positive) -> float:
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = 0.0
    for sp, sn in product(pos, neg):
        wins += 1.0 if sp > sn else 0.5 if sp == sn else 0.0
    return wins / (len(pos) * len(neg))


def brute_mauc(probs, actual) -> float:
    """Average over ordered class pairs (i, j) of P(score_i of an i-sample beats an j-sample)."""
    probs = np.asarray(probs)
    actual = list(actual)
    present = sorted(set(actual))
    total, count = 0.0, 0
    for i in present:
        for j in present:
            if i == j:
                continue
            idx = [k for k, a in enumerate(actual) if a in (i, j)]
            total += brute_binary_auc([probs[k, i] for k in idx], [actual[k] == i for k in idx])
            count += 1
    return total / count


# -- gradient checking ------------------------------------------------------------


def random_model(rng, n_in, hidden, alpha):
    hp = model.MlpHyperparams(hidden_sizes=hidden, alpha=alpha)
    m = model.init_model([f"c{i}" for i in range(n_in)], hp, rng)
    m.biases = [rng.normal(0, 0.1, size=b.shape) for b in m.biases]
    return m


# relative error |a - n| / max(|a|, |n|, FLOOR); the floor keeps entries whose
# true gradient is ~0 from dividing round-off by round-off
FD_STEP = 1e-5
FD_FLOOR = 1e-6


def finite_difference_errors(m, x, y) -> np.ndarray:
    grads = model.loss_gradient(m, x, y)
    errors = []
    for params, analytic in ((m.weights, grads.weights), (m.biases, grads.biases)):
        for p, g in zip(params, analytic):
            for idx in np.ndindex(p.shape):
                keep = p[idx]
                p[idx] = keep + FD_STEP
                up = model.loss(m, x, y)
                p[idx] = keep - FD_STEP
                down = model.loss(m, x, y)
                p[idx] = keep
                numeric = (up - down) / (2 * FD_STEP)
                errors.append(abs(g[idx] - numeric) / max(abs(g[idx]), abs(numeric), FD_FLOOR))
    return np.asarray(errors)
