"""Rank-based AUC, Hand & Till multiclass AUC, ROC curves and confusion matrices."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from adprog.cohort import CLASSES, Diagnosis


@dataclass(frozen=True)
class ScoredSample:
    probs: tuple[float, float, float]
    actual: Diagnosis

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if len(probs) != len(CLASSES):
            raise ValueError(f"expected {len(CLASSES)} probabilities, got {len(probs)}")
        if abs(sum(probs) - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {sum(probs)}, not 1")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "actual", Diagnosis(self.actual))


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = actual, columns = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _split(scores, positive) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if scores.shape != positive.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(positive.sum())
    if n_pos == 0 or n_pos == len(positive):
        raise ValueError("AUC needs at least one positive and one negative sample")
    return scores, positive


def auc_binary(scores: Sequence[float], positive: Sequence[bool]) -> float:
    """Mann-Whitney AUC with mid-ranks, i.e. ties count one half."""
    scores, positive = _split(scores, positive)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    rank_sum = rankdata(scores)[positive].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _as_arrays(samples: Iterable[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    probs = np.asarray([s.probs for s in samples], dtype=np.float64).reshape(len(samples), len(CLASSES))
    actual = np.asarray([int(s.actual) for s in samples], dtype=np.int64)
    return probs, actual


def mauc_arrays(probs: np.ndarray, actual: np.ndarray) -> float:
    """Hand & Till M over the classes present in ``actual``."""
    probs = np.asarray(probs, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.int64)
    present = sorted(set(actual.tolist()))
    if len(present) < 2:
        raise ValueError("mAUC needs samples from at least two classes")
    total = 0.0
    for i, j in combinations(present, 2):
        mask = (actual == i) | (actual == j)
        a_ij = auc_binary(probs[mask, i], actual[mask] == i)
        a_ji = auc_binary(probs[mask, j], actual[mask] == j)
        total += (a_ij + a_ji) / 2.0
    c = len(present)
    return float(total * 2.0 / (c * (c - 1)))


def mauc(samples: Iterable[ScoredSample]) -> float:
    return mauc_arrays(*_as_arrays(samples))


def roc_curve(scores: Sequence[float], positive: Sequence[bool]) -> list[tuple[float, float]]:
    """(fpr, tpr) points sweeping a threshold down through the distinct scores."""
    scores, positive = _split(scores, positive)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positive[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(p)[ends]
    fp = np.cumsum(~p)[ends]
    points = [(0.0, 0.0)]
    points += [(float(f) / n_neg, float(t) / n_pos) for f, t in zip(fp, tp)]
    return points


def trapezoid_area(points: Sequence[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def one_vs_rest(samples: Iterable[ScoredSample], cls: Diagnosis) -> tuple[np.ndarray, np.ndarray]:
    probs, actual = _as_arrays(samples)
    return probs[:, int(cls)], actual == int(cls)


def per_class_auc(samples: Sequence[ScoredSample]) -> dict[Diagnosis, float | None]:
    """One-vs-rest AUC per class; None where the class is absent or universal."""
    out = {}
    for cls in CLASSES:
        scores, positive = one_vs_rest(samples, cls)
        out[cls] = auc_binary(scores, positive) if 0 < positive.sum() < len(positive) else None
    return out


def predicted_labels(probs: np.ndarray) -> np.ndarray:
    """argmax; ties go to the lowest ordinal (NL before MCI before DEMENTIA)."""
    return np.argmax(np.asarray(probs), axis=1)


def confusion(samples: Iterable[ScoredSample]) -> ConfusionMatrix:
    probs, actual = _as_arrays(samples)
    if len(actual) == 0:
        raise ValueError("confusion matrix needs at least one sample")
    counts = np.zeros((len(CLASSES), len(CLASSES)), dtype=np.int64)
    np.add.at(counts, (actual, predicted_labels(probs)), 1)
    return ConfusionMatrix(counts)
