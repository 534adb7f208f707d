"""Multilayer perceptron written directly in numpy.

ReLU hidden layers, softmax output over (NL, MCI, DEMENTIA), mean
cross-entropy plus ``alpha/2 * sum(W**2)``, trained by mini-batch Adam (or
plain gradient descent). Inputs are standardised with the training matrix's
own column statistics, which travel with the model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from adprog.allpairs import TrainingMatrix
from adprog.cohort import CLASSES, DataError, Diagnosis

FORMAT_NAME = "adprog-mlp"
FORMAT_VERSION = 1
N_CLASSES = len(CLASSES)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalError(ArithmeticError):
    """Training diverged (non-finite loss or parameters)."""


class ModelFormatError(ValueError):
    """Serialized model is corrupt or from an unsupported format version."""


@dataclass(frozen=True)
class EarlyStopping:
    validation_fraction: float = 0.1
    patience: int = 15

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass(frozen=True)
class MlpHyperparams:
    hidden_sizes: tuple[int, ...] = (100,)
    alpha: float = 1e-4
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 300
    seed: int = 0
    early_stop: EarlyStopping | None = None
    solver: str = "adam"
    # Stop once the epoch loss has failed to improve by ``tol`` for this many epochs.
    tol: float = 1e-4
    n_iter_no_change: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden_sizes}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if self.solver not in ("adam", "sgd"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if isinstance(self.early_stop, dict):
            object.__setattr__(self, "early_stop", EarlyStopping(**self.early_stop))

    def replace(self, **changes) -> "MlpHyperparams":
        values = asdict(self)
        values.update(changes)
        return MlpHyperparams(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mean: np.ndarray
    scale: np.ndarray
    hyperparams: MlpHyperparams
    column_names: tuple[str, ...]
    classes: tuple[Diagnosis, ...] = CLASSES
    loss_curve: list[float] = field(default_factory=list)

    def __post_init__(self):
        sizes = [len(self.column_names)] + [w.shape[1] for w in self.weights]
        for w, b, fan_in, fan_out in zip(self.weights, self.biases, sizes[:-1], sizes[1:]):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError("layer dimensions do not chain")
        if sizes[-1] != N_CLASSES:
            raise ValueError(f"output layer must have {N_CLASSES} units")
        if self.mean.shape != (len(self.column_names),) or self.scale.shape != self.mean.shape:
            raise ValueError("scaler must have one (mean, sd) per column")

    @property
    def n_features(self) -> int:
        return len(self.column_names)


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def fit_scaler(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    constant = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
    sd = np.where(constant, 1.0, sd)
    return mean, sd


def init_model(column_names: Sequence[str], hp: MlpHyperparams, rng: np.random.Generator | None = None) -> MlpModel:
    """Glorot-uniform weights, zero biases, identity scaler."""
    rng = rng if rng is not None else np.random.default_rng(hp.seed)
    sizes = [len(column_names), *hp.hidden_sizes, N_CLASSES]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    n = len(column_names)
    return MlpModel(weights, biases, np.zeros(n), np.ones(n), hp, tuple(column_names))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(weights, biases, xs):
    """Return per-layer activations (input first) and output probabilities."""
    acts = [xs]
    a = xs
    for w, b in zip(weights[:-1], biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
        acts.append(a)
    logits = a @ weights[-1] + biases[-1]
    return acts, logits


def _loss_from_logits(logits, y, weights, alpha):
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -log_probs[np.arange(len(y)), y].mean()
    penalty = 0.5 * alpha * sum(float(np.sum(w * w)) for w in weights)
    return ce + penalty, log_probs


def _loss_and_grads(weights, biases, xs, y, alpha):
    acts, logits = _forward(weights, biases, xs)
    loss, log_probs = _loss_from_logits(logits, y, weights, alpha)
    n = len(y)
    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for layer in range(len(weights) - 1, -1, -1):
        gw[layer] = acts[layer].T @ delta + alpha * weights[layer]
        gb[layer] = delta.sum(axis=0)
        if layer:
            delta = (delta @ weights[layer].T) * (acts[layer] > 0)
    return loss, gw, gb


def _standardize(model: MlpModel, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2 or rows.shape[1] != model.n_features:
        raise ValueError(f"expected rows with {model.n_features} columns, got shape {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise DataError("feature rows contain non-finite values")
    return (rows - model.mean) / model.scale


def loss(model: MlpModel, rows: np.ndarray, targets: np.ndarray) -> float:
    xs = _standardize(model, rows)
    _, logits = _forward(model.weights, model.biases, xs)
    value, _ = _loss_from_logits(logits, np.asarray(targets, dtype=np.int64), model.weights, model.hyperparams.alpha)
    return float(value)


def loss_gradient(model: MlpModel, rows: np.ndarray, targets: np.ndarray) -> Gradients:
    """Analytic gradient of the regularised loss for one batch."""
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        raise ValueError("empty batch")
    xs = _standardize(model, rows)
    _, gw, gb = _loss_and_grads(model.weights, model.biases, xs, targets, model.hyperparams.alpha)
    return Gradients(gw, gb)


def predict_proba(model: MlpModel, rows: np.ndarray) -> np.ndarray:
    """Class probabilities, one (p_NL, p_MCI, p_DEMENTIA) row per input row."""
    xs = _standardize(model, rows)
    _, logits = _forward(model.weights, model.biases, xs)
    return _softmax(logits)


def _check_training_data(x: np.ndarray, y: np.ndarray) -> None:
    if len(y) == 0:
        raise DataError("cannot fit on an empty training matrix")
    if not np.all(np.isfinite(x)):
        raise DataError("training matrix contains non-finite feature values")
    if len(np.unique(y)) < 2:
        raise DataError(f"training targets contain a single class ({Diagnosis(int(y[0])).name})")
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise DataError("targets must be diagnosis ordinals 0..2")


class _Adam:
    def __init__(self, params, lr):
        self.lr = lr
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        lr_t = self.lr * np.sqrt(1 - ADAM_BETA2**self.t) / (1 - ADAM_BETA1**self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            p -= lr_t * m / (np.sqrt(v) + ADAM_EPS)


class _Sgd:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


def _validation_mask(matrix: TrainingMatrix, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Hold out whole patients when provenance is available, else single rows."""
    ids = [p.patient_id for p in matrix.provenance]
    unique = sorted(set(ids))
    if len(unique) >= 2:
        n_val = max(1, int(round(fraction * len(unique))))
        held = {unique[i] for i in rng.permutation(len(unique))[:n_val]}
        return np.asarray([pid in held for pid in ids], dtype=bool)
    n = len(matrix.y)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[: max(1, int(round(fraction * n)))]] = True
    return mask


def fit(matrix: TrainingMatrix, hp: MlpHyperparams | None = None) -> MlpModel:
    """Train an MLP on a TrainingMatrix. Deterministic for a given ``hp.seed``."""
    hp = hp or MlpHyperparams()
    x = np.asarray(matrix.x, dtype=np.float64)
    y = np.asarray(matrix.y, dtype=np.int64)
    _check_training_data(x, y)
    rng = np.random.default_rng(hp.seed)

    model = init_model(matrix.column_names, hp, rng)
    model.mean, model.scale = fit_scaler(x)
    xs = (x - model.mean) / model.scale

    val_xs = val_y = None
    if hp.early_stop is not None:
        val_mask = _validation_mask(matrix, hp.early_stop.validation_fraction, rng)
        if val_mask.all() or not val_mask.any():
            raise DataError("too few rows for an early-stopping validation split")
        val_idx, train_idx = np.flatnonzero(val_mask), np.flatnonzero(~val_mask)
        val_xs, val_y = xs[val_idx], y[val_idx]
        xs, y = xs[train_idx], y[train_idx]

    params = model.weights + model.biases
    n_layers = len(model.weights)
    optimizer = _Adam(params, hp.learning_rate) if hp.solver == "adam" else _Sgd(params, hp.learning_rate)
    batch = min(hp.batch_size, len(y))

    best_loss = np.inf
    stall = 0
    best_val = np.inf
    best_params = None
    val_stall = 0
    for _epoch in range(hp.max_epochs):
        order = rng.permutation(len(y)) if batch < len(y) else np.arange(len(y))
        total = 0.0
        for start in range(0, len(y), batch):
            idx = order[start : start + batch]
            batch_loss, gw, gb = _loss_and_grads(model.weights, model.biases, xs[idx], y[idx], hp.alpha)
            optimizer.step(params, gw + gb)
            total += batch_loss * len(idx)
        epoch_loss = total / len(y)
        if not np.isfinite(epoch_loss):
            raise NumericalError(f"training loss became non-finite at epoch {_epoch}")
        model.loss_curve.append(epoch_loss)

        if val_xs is not None:
            _, logits = _forward(model.weights, model.biases, val_xs)
            val_loss, _ = _loss_from_logits(logits, val_y, model.weights, hp.alpha)
            if val_loss < best_val - hp.tol:
                best_val = val_loss
                best_params = [p.copy() for p in params]
                val_stall = 0
            else:
                val_stall += 1
                if val_stall >= hp.early_stop.patience:
                    break
        else:
            if epoch_loss > best_loss - hp.tol:
                stall += 1
                if stall >= hp.n_iter_no_change:
                    break
            else:
                stall = 0
            best_loss = min(best_loss, epoch_loss)

    if best_params is not None:
        for p, best in zip(params, best_params):
            p[...] = best
    model.weights, model.biases = params[:n_layers], params[n_layers:]
    return model


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize(model: MlpModel) -> bytes:
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "column_names": list(model.column_names),
        "classes": [c.name for c in model.classes],
        "hyperparams": model.hyperparams.to_dict(),
        "scaler": {"mean": model.mean.tolist(), "scale": model.scale.tolist()},
        "layers": [{"weights": w.tolist(), "biases": b.tolist()} for w, b in zip(model.weights, model.biases)],
    }
    payload["checksum"] = hashlib.sha256(_canonical(payload)).hexdigest()
    return json.dumps(payload, sort_keys=True, indent=1).encode("utf-8")


def deserialize(blob: bytes) -> MlpModel:
    try:
        payload = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt model blob: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_NAME:
        raise ModelFormatError("not an adprog model blob")
    if payload.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {payload.get('version')!r} (expected {FORMAT_VERSION})")
    checksum = payload.pop("checksum", None)
    if checksum != hashlib.sha256(_canonical(payload)).hexdigest():
        raise ModelFormatError("model checksum mismatch; blob is corrupt")
    try:
        hp = MlpHyperparams(**payload["hyperparams"])
        return MlpModel(
            weights=[np.asarray(layer["weights"], dtype=np.float64) for layer in payload["layers"]],
            biases=[np.asarray(layer["biases"], dtype=np.float64) for layer in payload["layers"]],
            mean=np.asarray(payload["scaler"]["mean"], dtype=np.float64),
            scale=np.asarray(payload["scaler"]["scale"], dtype=np.float64),
            hyperparams=hp,
            column_names=tuple(payload["column_names"]),
            classes=tuple(Diagnosis[c] for c in payload["classes"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model blob: {exc}") from None


def save(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load(path) -> MlpModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
