"""Evaluation protocols: k-fold CV, repeated random splits, hyperparameter grid,
forward prediction of LB4 diagnoses from LB2 exams, and monthly forecasts.

Every stochastic step draws from a sub-seed derived from the master seed and a
job label (``derive_seed``), so results do not depend on execution order or on
how many worker processes run the jobs.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from adprog.allpairs import (
    TrainingMatrix,
    build_prediction_vector,
    column_names,
    transform,
    usable,
)
from adprog.cohort import (
    GROUP_FEATURES,
    DataError,
    Diagnosis,
    Examination,
    FeatureGroup,
    PatientRecord,
    feature_group,
    months_between,
)
from adprog.metrics import ScoredSample, mauc, mauc_arrays
from adprog.model import MlpHyperparams, MlpModel, NumericalError, fit, predict_proba

GROUPINGS = ("patient", "row")
PROTOCOLS = ("split", "cv", "forward")
LAST_N_EXAMS = 3


def derive_seed(master: int, label: str) -> int:
    """32-bit sub-seed: first four bytes of sha256("<master>/<label>")."""
    digest = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _map(func: Callable, jobs: Sequence, n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [func(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(func, jobs))


def _n_classes(y: np.ndarray) -> int:
    return len(np.unique(y))


def _fit_and_score(train: TrainingMatrix, test: TrainingMatrix, hp: MlpHyperparams) -> tuple[float, float]:
    model = fit(train, hp)
    train_score = mauc_arrays(predict_proba(model, train.x), train.y)
    test_score = mauc_arrays(predict_proba(model, test.x), test.y)
    return train_score, test_score


def _degenerate(train: TrainingMatrix, test: TrainingMatrix) -> str | None:
    if _n_classes(train.y) < 2:
        return f"training side has {_n_classes(train.y)} class(es) in {len(train)} rows"
    if _n_classes(test.y) < 2:
        return f"test side has {_n_classes(test.y)} class(es) in {len(test)} rows"
    return None


# ----------------------------------------------------------------------------
# k-fold cross-validation


@dataclass
class FoldResult:
    index: int
    n_train: int
    n_test: int
    train_mauc: float | None = None
    test_mauc: float | None = None
    excluded: str | None = None


@dataclass
class CvReport:
    k: int
    grouping: str
    folds: list[FoldResult]
    config: dict
    note: str = ""

    @property
    def included(self) -> list[FoldResult]:
        return [f for f in self.folds if f.excluded is None]

    @property
    def mean_train(self) -> float:
        scores = [f.train_mauc for f in self.included]
        return statistics.fmean(scores) if scores else math.nan

    @property
    def mean_test(self) -> float:
        scores = [f.test_mauc for f in self.included]
        return statistics.fmean(scores) if scores else math.nan

    @property
    def test_sd(self) -> float:
        """Sample standard deviation (n - 1) of the fold test scores."""
        scores = [f.test_mauc for f in self.included]
        return statistics.stdev(scores) if len(scores) > 1 else math.nan

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "grouping": self.grouping,
            "config": self.config,
            "folds": [asdict(f) for f in self.folds],
            "mean_train_mauc": self.mean_train,
            "mean_test_mauc": self.mean_test,
            "test_sd": self.test_sd,
            "note": self.note,
        }


def config_descriptor(group: FeatureGroup, mode: str, hp: MlpHyperparams, seed: int) -> dict:
    return {"features": group.name, "mode": mode, "hyperparams": hp.to_dict(), "seed": seed}


def make_folds(
    records: Sequence[PatientRecord],
    group: FeatureGroup,
    mode: str,
    k: int,
    grouping: str = "patient",
    seed: int = 0,
    matrix: TrainingMatrix | None = None,
) -> list[tuple[TrainingMatrix, TrainingMatrix]]:
    """(train, test) matrices for each of the ``k`` folds.

    Patient grouping shuffles patient ids and deals them into ``k`` near-equal
    folds, so every row of a patient lands in the same fold. Row grouping
    shuffles transformed rows directly.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if grouping not in GROUPINGS:
        raise ValueError(f"unknown grouping {grouping!r}; expected one of {GROUPINGS}")
    matrix = matrix if matrix is not None else transform(records, group, mode)
    rng = np.random.default_rng(derive_seed(seed, f"folds/{grouping}"))
    if grouping == "patient":
        ids = sorted({r.patient_id for r in records})
        if len(ids) < k:
            raise DataError(f"{len(ids)} patients cannot fill {k} folds")
        perm = rng.permutation(len(ids))
        fold_of = {}
        for fold, members in enumerate(np.array_split(perm, k)):
            for m in members:
                fold_of[ids[m]] = fold
        row_fold = np.asarray([fold_of[p.patient_id] for p in matrix.provenance], dtype=int)
    else:
        if len(matrix) < k:
            raise DataError(f"{len(matrix)} rows cannot fill {k} folds")
        row_fold = np.empty(len(matrix), dtype=int)
        for fold, members in enumerate(np.array_split(rng.permutation(len(matrix)), k)):
            row_fold[members] = fold
    out = []
    for fold in range(k):
        out.append((matrix.subset(np.flatnonzero(row_fold != fold)), matrix.subset(np.flatnonzero(row_fold == fold))))
    return out


def _cv_fold_job(job) -> FoldResult:
    index, train, test, hp = job
    result = FoldResult(index, len(train), len(test))
    reason = _degenerate(train, test)
    if reason:
        result.excluded = reason
        return result
    result.train_mauc, result.test_mauc = _fit_and_score(train, test, hp)
    return result


def cross_validate(
    records: Sequence[PatientRecord],
    group: FeatureGroup,
    mode: str,
    hp: MlpHyperparams,
    k: int = 7,
    grouping: str = "patient",
    seed: int = 0,
    jobs: int = 1,
) -> CvReport:
    folds = make_folds(records, group, mode, k, grouping, seed)
    work = [
        (i, train, test, hp.replace(seed=derive_seed(seed, f"cv/fold{i}")))
        for i, (train, test) in enumerate(folds)
    ]
    results = _map(_cv_fold_job, work, jobs)
    note = ""
    if grouping == "row":
        note = "row-level folds: one patient's rows can fall on both sides of a split"
    return CvReport(k, grouping, results, config_descriptor(group, mode, hp, seed), note)


# ----------------------------------------------------------------------------
# repeated random patient-level splits


@dataclass
class SplitScore:
    index: int
    train_mauc: float | None = None
    test_mauc: float | None = None
    skipped: str | None = None


@dataclass
class SplitsResult:
    splits: list[SplitScore]
    train_fraction: float
    config: dict

    @property
    def scores(self) -> list[tuple[float, float]]:
        return [(s.train_mauc, s.test_mauc) for s in self.splits if s.skipped is None]

    @property
    def skipped(self) -> list[SplitScore]:
        return [s for s in self.splits if s.skipped is not None]


def patient_split(
    matrix: TrainingMatrix, patient_ids: Sequence[str], train_fraction: float, seed: int
) -> tuple[TrainingMatrix, TrainingMatrix]:
    ids = sorted(set(patient_ids))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    train_ids = {ids[i] for i in perm[:n_train]}
    in_train = np.asarray([p.patient_id in train_ids for p in matrix.provenance], dtype=bool)
    return matrix.subset(np.flatnonzero(in_train)), matrix.subset(np.flatnonzero(~in_train))


def _split_job(job) -> SplitScore:
    index, train, test, hp = job
    reason = _degenerate(train, test)
    if reason:
        return SplitScore(index, skipped=reason)
    train_score, test_score = _fit_and_score(train, test, hp)
    return SplitScore(index, train_score, test_score)


def random_splits(
    records: Sequence[PatientRecord],
    group: FeatureGroup,
    mode: str,
    hp: MlpHyperparams,
    n_splits: int = 100,
    train_fraction: float = 0.7,
    seed: int = 0,
    jobs: int = 1,
) -> SplitsResult:
    if n_splits < 1:
        raise ValueError("n_splits must be >= 1")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    matrix = transform(records, group, mode)
    ids = [r.patient_id for r in records]
    work = []
    for s in range(n_splits):
        train, test = patient_split(matrix, ids, train_fraction, derive_seed(seed, f"splits/{s}"))
        work.append((s, train, test, hp.replace(seed=derive_seed(seed, f"splits/{s}/fit"))))
    return SplitsResult(_map(_split_job, work, jobs), train_fraction, config_descriptor(group, mode, hp, seed))


# ----------------------------------------------------------------------------
# forward prediction (LB2 -> LB4) and monthly forecasts


def infer_layout(model: MlpModel) -> tuple[FeatureGroup, str]:
    """Recover (feature group, mode) from a model's column names."""
    for name in GROUP_FEATURES:
        group = feature_group(name)
        for mode in ("pairs", "triplets"):
            if column_names(group, mode) == tuple(model.column_names):
                return group, mode
    raise DataError("model columns do not match any registered feature group / mode")


@dataclass(frozen=True)
class ForwardTarget:
    """What forward evaluation may know about an LB4 exam: its date and diagnosis."""

    patient_id: str
    exam_date: object
    diagnosis: Diagnosis


def lb4_targets(lb4: Iterable[PatientRecord]) -> list[ForwardTarget]:
    return [
        ForwardTarget(rec.patient_id, exam.exam_date, exam.diagnosis)
        for rec in lb4
        for exam in rec.exams
        if exam.diagnosis is not None
    ]


def source_exams(record: PatientRecord, group: FeatureGroup, mode: str) -> list[tuple[Examination, Examination | None]]:
    """(exam, prior) pairs feeding prediction vectors: the last three usable exams.

    In triplet mode each exam is paired with the usable exam just before it;
    an exam with no usable predecessor is dropped.
    """
    ok = [e for e in record.exams if usable(e, group)]
    if mode == "pairs":
        return [(e, None) for e in ok[-LAST_N_EXAMS:]]
    start = max(1, len(ok) - LAST_N_EXAMS)
    return [(ok[i], ok[i - 1]) for i in range(start, len(ok))]


@dataclass
class ForwardResult:
    samples: list[ScoredSample]
    targets: list[ForwardTarget]
    n_vectors: list[int]
    mauc: float | None
    excluded: list[tuple[str, str]] = field(default_factory=list)


def _averaged(model: MlpModel, sources, times, group, mode) -> np.ndarray:
    rows = [build_prediction_vector(e, t, group, mode, prior) for (e, prior), t in zip(sources, times)]
    return predict_proba(model, np.vstack(rows)).mean(axis=0)


def evaluate_forward(
    model: MlpModel,
    lb2: Sequence[PatientRecord],
    lb4: Sequence[PatientRecord],
    mode: str | None = None,
) -> ForwardResult:
    """Score the averaged prediction for every diagnosed LB4 exam.

    For each LB4 exam the model sees one vector per LB2 source exam, with t
    the months from that source exam to the LB4 exam; the probability triples
    are averaged. Only LB4 dates and diagnoses are read.
    """
    group, model_mode = infer_layout(model)
    if mode is not None and mode != model_mode:
        raise DataError(f"model was trained in {model_mode} mode, not {mode}")
    mode = model_mode
    by_id = {r.patient_id: r for r in lb2}
    targets = lb4_targets(lb4)
    missing = sorted({t.patient_id for t in targets} - set(by_id))
    if missing:
        raise DataError(f"LB4 patients absent from LB2: {missing[:5]}")

    sources = {pid: source_exams(rec, group, mode) for pid, rec in by_id.items()}
    excluded = [(pid, "no usable LB2 exams") for pid in sorted(sources) if not sources[pid]]
    samples, kept, n_vectors = [], [], []
    for target in targets:
        src = sources[target.patient_id]
        if not src:
            continue
        times = [months_between(target.exam_date, e.exam_date) for e, _ in src]
        probs = _averaged(model, src, times, group, mode)
        samples.append(ScoredSample(tuple(probs), target.diagnosis))
        kept.append(target)
        n_vectors.append(len(src))
    classes = {s.actual for s in samples}
    score = mauc(samples) if len(classes) >= 2 else None
    return ForwardResult(samples, kept, n_vectors, score, excluded)


@dataclass
class ForecastTable:
    patient_ids: list[str]
    probs: np.ndarray  # (patients, horizon, 3); month m is index m - 1
    excluded: list[tuple[str, str]] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.probs.shape[1]

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.probs, axis=2)

    def rows(self):
        """(patient_id, month, p_NL, p_MCI, p_DEM, argmax) in long format."""
        pred = self.predicted
        for i, pid in enumerate(self.patient_ids):
            for m in range(self.horizon):
                p = self.probs[i, m]
                yield pid, m + 1, float(p[0]), float(p[1]), float(p[2]), int(pred[i, m])


def forecast_monthly(
    model: MlpModel, lb2: Sequence[PatientRecord], horizon: int = 84, mode: str | None = None
) -> ForecastTable:
    """Averaged class probabilities for t = 1..horizon months after each source exam."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    group, model_mode = infer_layout(model)
    if mode is not None and mode != model_mode:
        raise DataError(f"model was trained in {model_mode} mode, not {mode}")
    ids, tables, excluded = [], [], []
    for rec in sorted(lb2, key=lambda r: r.patient_id):
        src = source_exams(rec, group, model_mode)
        if not src:
            excluded.append((rec.patient_id, "no usable LB2 exams"))
            continue
        rows = np.vstack(
            [build_prediction_vector(e, float(t), group, model_mode, prior) for t in range(1, horizon + 1) for e, prior in src]
        )
        probs = predict_proba(model, rows).reshape(horizon, len(src), -1).mean(axis=1)
        ids.append(rec.patient_id)
        tables.append(probs)
    probs = np.stack(tables) if tables else np.zeros((0, horizon, 3))
    return ForecastTable(ids, probs, excluded)


# ----------------------------------------------------------------------------
# hyperparameter grid


@dataclass
class GridRow:
    index: int
    alpha: float
    learning_rate: float
    hidden_sizes: tuple[int, ...]
    scores: list[float]
    error: str | None = None

    @property
    def mean(self) -> float:
        return statistics.fmean(self.scores) if self.scores and self.error is None else math.nan

    @property
    def sd(self) -> float:
        return statistics.stdev(self.scores) if len(self.scores) > 1 and self.error is None else math.nan


@dataclass
class GridResult:
    rows: list[GridRow]  # ranked, best first
    n_runs: int
    protocol: str
    config: dict


DEFAULT_GRID = {
    "alpha": (1e-4, 1e-3, 1e-2),
    "learning_rate": (1e-4, 1e-3, 1e-2),
    "hidden_sizes": ((50,), (100,), (200,)),
}


def _grid_job(job) -> tuple[float | None, str | None]:
    protocol, records, group, mode, hp, run_seed, options = job
    try:
        if protocol == "split":
            matrix = transform(records, group, mode)
            train, test = patient_split(
                matrix, [r.patient_id for r in records], options["train_fraction"], derive_seed(run_seed, "split")
            )
            reason = _degenerate(train, test)
            if reason:
                return None, reason
            return _fit_and_score(train, test, hp.replace(seed=derive_seed(run_seed, "fit")))[1], None
        if protocol == "cv":
            report = cross_validate(records, group, mode, hp, options["k"], "patient", run_seed)
            if not report.included:
                return None, "every fold was excluded"
            return report.mean_test, None
        model = fit(transform(records, group, mode), hp.replace(seed=derive_seed(run_seed, "fit")))
        result = evaluate_forward(model, options["lb2"], options["lb4"], mode)
        if result.mauc is None:
            return None, "LB4 targets contain fewer than two classes"
        return result.mauc, None
    except (DataError, NumericalError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def grid_search(
    records: Sequence[PatientRecord],
    group: FeatureGroup,
    mode: str,
    grids: dict | None = None,
    repeats: int = 5,
    protocol: str = "split",
    seed: int = 0,
    base_hp: MlpHyperparams | None = None,
    lb2: Sequence[PatientRecord] | None = None,
    lb4: Sequence[PatientRecord] | None = None,
    k: int = 7,
    train_fraction: float = 0.7,
    jobs: int = 1,
) -> GridResult:
    """Evaluate every alpha x learning-rate x hidden-size combination ``repeats``
    times, each with its own derived seed, and rank by mean test mAUC."""
    grids = dict(DEFAULT_GRID, **(grids or {}))
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if protocol == "forward" and (lb2 is None or lb4 is None):
        raise ValueError("forward protocol needs lb2 and lb4")
    for key in ("alpha", "learning_rate", "hidden_sizes"):
        if not grids[key]:
            raise ValueError(f"grid for {key} is empty")
    base_hp = base_hp or MlpHyperparams()
    options = {"k": k, "train_fraction": train_fraction, "lb2": lb2, "lb4": lb4}

    combos = list(itertools.product(grids["alpha"], grids["learning_rate"], grids["hidden_sizes"]))
    work = []
    for ci, (alpha, lr, hidden) in enumerate(combos):
        hidden = (hidden,) if isinstance(hidden, int) else tuple(hidden)
        hp = base_hp.replace(alpha=alpha, learning_rate=lr, hidden_sizes=hidden)
        for r in range(repeats):
            work.append((protocol, records, group, mode, hp, derive_seed(seed, f"grid/{ci}/{r}"), options))
    outcomes = _map(_grid_job, work, jobs)

    rows = []
    for ci, (alpha, lr, hidden) in enumerate(combos):
        hidden = (hidden,) if isinstance(hidden, int) else tuple(hidden)
        mine = outcomes[ci * repeats : (ci + 1) * repeats]
        errors = [err for _, err in mine if err]
        scores = [s for s, err in mine if err is None]
        rows.append(GridRow(ci, float(alpha), float(lr), hidden, scores, errors[0] if errors else None))
    rows.sort(key=lambda r: (r.error is not None, -r.mean if r.error is None else 0.0, r.index))
    config = {"features": group.name, "mode": mode, "repeats": repeats, "seed": seed, "base_hyperparams": base_hp.to_dict()}
    return GridResult(rows, len(work), protocol, config)
