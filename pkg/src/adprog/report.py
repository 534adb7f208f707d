"""Write result tables and figures to an output directory with a checksum manifest.

CSV numbers use 17 significant digits (``format(x, ".17g")``), which is
lossless for 64-bit floats; missing values are written as empty cells. SVG
figures are assembled directly as XML text.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from adprog.cohort import CLASS_LABELS, CLASSES, Diagnosis
from adprog.evaluation import CvReport, ForecastTable, GridResult, SplitsResult
from adprog.metrics import ScoredSample, confusion, one_vs_rest, roc_curve

FORMATS = ("csv", "json", "svg")
MANIFEST = "manifest.json"

# most severe actual diagnosis -> colour; grey when no actuals are known
SEVERITY_COLOURS = {Diagnosis.NL: "#2ca02c", Diagnosis.MCI: "#e6b800", Diagnosis.DEMENTIA: "#d62728"}
UNKNOWN_COLOUR = "#7f7f7f"
CLASS_DASH = {Diagnosis.NL: "", Diagnosis.MCI: "6,3", Diagnosis.DEMENTIA: "2,2"}


def fmt(value) -> str:
    """CSV cell text: 17 significant digits for floats, '' for None."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def short(value: float) -> str:
    """Four significant digits, for human-facing labels."""
    return "nan" if value is None or math.isnan(value) else format(value, ".4g")


def config_label(config: Mapping) -> str:
    hp = config.get("hyperparams", {})
    hidden = "x".join(str(h) for h in hp.get("hidden_sizes", ()))
    parts = [str(config.get("features", "?")), str(config.get("mode", "?"))]
    if hp:
        parts += [f"h{hidden}", f"a{hp.get('alpha')}", f"lr{hp.get('learning_rate')}"]
    return "/".join(parts)


def severity_colour(diagnoses: Iterable[Diagnosis] | None) -> str:
    diagnoses = [d for d in (diagnoses or ()) if d is not None]
    return SEVERITY_COLOURS[max(diagnoses)] if diagnoses else UNKNOWN_COLOUR


class ReportBundle:
    """An output directory plus the checksums of everything written to it.

    The manifest is only written by ``finalize``; an existing manifest in the
    directory is merged so several commands can share one bundle.
    """

    def __init__(self, out_dir: str | Path, formats: Iterable[str] = FORMATS):
        self.out_dir = Path(out_dir)
        self.formats = frozenset(formats)
        unknown = self.formats - set(FORMATS)
        if unknown:
            raise ValueError(f"unknown report formats {sorted(unknown)}; expected a subset of {FORMATS}")
        self.entries: dict[str, str] = {}

    # -- low level -----------------------------------------------------------

    def write_bytes(self, name: str, data: bytes) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.entries[Path(name).as_posix()] = hashlib.sha256(data).hexdigest()
        return path

    def register(self, path: str | Path) -> bool:
        """Record a file written by someone else; only files inside the bundle count."""
        path = Path(path)
        try:
            name = path.resolve().relative_to(self.out_dir.resolve()).as_posix()
        except ValueError:
            return False
        self.entries[name] = hashlib.sha256(path.read_bytes()).hexdigest()
        return True

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode("utf-8"))

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
        return self.write_text(name, buf.getvalue())

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def finalize(self) -> Path:
        path = self.out_dir / MANIFEST
        files = {}
        if path.is_file():
            try:
                previous = json.loads(path.read_text(encoding="utf-8"))
                files = {e["path"]: e["sha256"] for e in previous.get("files", [])}
            except (ValueError, KeyError, TypeError):
                files = {}
        files.update(self.entries)
        files = {name: digest for name, digest in files.items() if (self.out_dir / name).is_file()}
        manifest = {"files": [{"path": name, "sha256": files[name]} for name in sorted(files)]}
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return path

    # -- tables --------------------------------------------------------------

    def emit_cv_table(self, reports: Sequence[CvReport], labels: Sequence[str] | None = None) -> list[Path]:
        """One row per configuration, best mean test mAUC first."""
        if not reports:
            raise ValueError("emit_cv_table needs at least one CV report")
        labels = list(labels) if labels is not None else [config_label(r.config) for r in reports]
        order = sorted(range(len(reports)), key=lambda i: (_desc(reports[i].mean_test), i))
        rows = [(labels[i], reports[i].mean_train, reports[i].mean_test, reports[i].test_sd) for i in order]
        out = [self.write_csv("cv_table.csv", ["config", "train_mauc", "test_mauc", "test_sd"], rows)]
        if "json" in self.formats:
            out.append(self.write_json("cv.json", [dict(r.to_dict(), label=labels[i]) for i, r in enumerate(reports)]))
        return out

    def emit_splits(self, result: SplitsResult) -> list[Path]:
        rows = [(s.index, s.train_mauc, s.test_mauc, s.skipped) for s in result.splits]
        out = [self.write_csv("splits.csv", ["split", "train_mauc", "test_mauc", "skipped"], rows)]
        if "svg" in self.formats and result.scores:
            out.append(self.write_text("splits.svg", _box_plot_svg(result)))
        return out

    def emit_grid(self, result: GridResult) -> list[Path]:
        header = ["rank", "config", "alpha", "learning_rate", "hidden_sizes", "mean_mauc", "sd_mauc", "n_scores", "error"]
        rows = [
            (rank, row.index, row.alpha, row.learning_rate, "x".join(map(str, row.hidden_sizes)),
             None if row.error else row.mean, None if row.error or len(row.scores) < 2 else row.sd,
             len(row.scores), row.error)
            for rank, row in enumerate(result.rows, start=1)
        ]
        out = [self.write_csv("grid.csv", header, rows)]
        scores = [(row.index, i, s) for row in result.rows for i, s in enumerate(row.scores)]
        out.append(self.write_csv("grid_scores.csv", ["config", "repeat", "mauc"], sorted(scores)))
        if "json" in self.formats:
            out.append(self.write_json("grid.json", {"protocol": result.protocol, "n_runs": result.n_runs, "config": result.config}))
        if "svg" in self.formats and any(row.scores for row in result.rows):
            out.append(self.write_text("grid.svg", _dot_plot_svg(result)))
        return out

    def emit_predictions(self, samples: Sequence[ScoredSample], ids: Sequence[str] | None = None,
                         months: Sequence[float] | None = None) -> list[Path]:
        header = ["patient_id", "months", "prob_NL", "prob_MCI", "prob_DEM", "actual"]
        ids = ids if ids is not None else [None] * len(samples)
        months = months if months is not None else [None] * len(samples)
        rows = [(pid, m, *s.probs, int(s.actual)) for pid, m, s in zip(ids, months, samples)]
        return [self.write_csv("predictions.csv", header, rows)]

    def emit_confusion(self, samples: Sequence[ScoredSample]) -> list[Path]:
        counts = confusion(samples).counts
        rows = [(f"actual_{CLASS_LABELS[i]}", *counts[i]) for i in range(len(CLASSES))]
        out = [self.write_csv("confusion.csv", ["actual"] + [f"pred_{c}" for c in CLASS_LABELS], rows)]
        if "svg" in self.formats:
            out.append(self.write_text("confusion.svg", _confusion_svg(counts)))
        return out

    def emit_roc(self, samples: Sequence[ScoredSample]) -> list[Path]:
        """One-vs-rest ROC points per class; classes absent (or universal) are skipped."""
        out, curves = [], {}
        for cls, label in zip(CLASSES, CLASS_LABELS):
            scores, positive = one_vs_rest(samples, cls)
            if not 0 < positive.sum() < len(positive):
                continue
            points = roc_curve(scores, positive)
            curves[label] = points
            out.append(self.write_csv(f"roc_{label}.csv", ["fpr", "tpr"], points))
        if "svg" in self.formats and curves:
            out.append(self.write_text("roc.svg", _roc_svg(curves)))
        return out

    # -- forecasts -------------------------------------------------------------

    def emit_forecast(self, table: ForecastTable) -> list[Path]:
        """Long-format monthly probabilities: one row per patient and month."""
        header = ["patient_id", "month", "p_NL", "p_MCI", "p_DEM", "argmax"]
        return [self.write_csv("forecast.csv", header, table.rows())]

    def emit_trajectories(self, table: ForecastTable,
                          actuals: Mapping[str, Sequence[Diagnosis]] | None = None) -> list[Path]:
        """forecast.csv plus, with svg enabled, a heat strip of predicted classes
        and one probability chart per patient coloured by the most severe
        actual diagnosis."""
        if not table.patient_ids:
            raise ValueError("forecast table is empty")
        out = self.emit_forecast(table)
        if "svg" in self.formats:
            out.append(self.write_text("heatstrip.svg", _heatstrip_svg(table)))
            for i, pid in enumerate(table.patient_ids):
                colour = severity_colour((actuals or {}).get(pid))
                out.append(self.write_text(f"trajectories/{_safe(pid)}.svg", _trajectory_svg(pid, table.probs[i], colour)))
        return out


def _desc(value: float) -> float:
    return math.inf if value is None or math.isnan(value) else -value


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, set, frozenset)):
        return list(obj)
    return str(obj)


# ----------------------------------------------------------------------------
# SVG helpers; coordinates are rounded to 0.01 so output is stable


W, H, PAD = 480, 320, 40


def _n(x: float) -> str:
    return format(round(float(x), 2), "g")


def _svg(width: float, height: float, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_n(width)}" height="{_n(height)}" '
        f'viewBox="0 0 {_n(width)} {_n(height)}">'
    )
    return "\n".join([head, *body, "</svg>"]) + "\n"


def _text(x, y, s, size=11, anchor="start") -> str:
    return f'<text x="{_n(x)}" y="{_n(y)}" font-size="{size}" text-anchor="{anchor}">{escape(str(s))}</text>'


def _polyline(points, colour, dash="", width=1.5) -> str:
    pts = " ".join(f"{_n(x)},{_n(y)}" for x, y in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline fill="none" stroke="{colour}" stroke-width="{width}"{dash_attr} points="{pts}"/>'


def _axes(title: str) -> list[str]:
    return [
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        _text(W / 2, PAD / 2, title, 13, "middle"),
    ]


def _unit_xy(x: float, y: float) -> tuple[float, float]:
    """Map the unit square to the plot area (y up)."""
    return PAD + x * (W - 2 * PAD), H - PAD - y * (H - 2 * PAD)


def _roc_svg(curves: Mapping[str, list[tuple[float, float]]]) -> str:
    colours = dict(zip(CLASS_LABELS, SEVERITY_COLOURS.values()))
    body = _axes("ROC (one vs rest)")
    body.append(_polyline([_unit_xy(0, 0), _unit_xy(1, 1)], "#bbbbbb", "4,4", 1))
    for k, (label, points) in enumerate(curves.items()):
        body.append(_polyline([_unit_xy(x, y) for x, y in points], colours[label]))
        body.append(_text(W - PAD - 60, H - PAD - 14 * (len(curves) - k), label))
    body += [_text(W / 2, H - 8, "false positive rate", anchor="middle"), _text(4, PAD - 6, "TPR")]
    return _svg(W, H, body)


def _confusion_svg(counts: np.ndarray) -> str:
    cell = 60
    size = PAD * 2 + cell * len(CLASSES)
    peak = max(int(counts.max()), 1)
    body = [f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>']
    for i in range(len(CLASSES)):
        body.append(_text(PAD - 4, PAD + cell * i + cell / 2, CLASS_LABELS[i], anchor="end"))
        body.append(_text(PAD + cell * i + cell / 2, PAD - 6, CLASS_LABELS[i], anchor="middle"))
        for j in range(len(CLASSES)):
            shade = 255 - int(round(200 * counts[i, j] / peak))
            x, y = PAD + cell * j, PAD + cell * i
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="black"/>')
            body.append(_text(x + cell / 2, y + cell / 2 + 4, int(counts[i, j]), anchor="middle"))
    body.append(_text(size / 2, size - 8, "predicted (columns) vs actual (rows)", anchor="middle"))
    return _svg(size, size, body)


def _box_plot_svg(result: SplitsResult) -> str:
    train = np.array([s[0] for s in result.scores])
    test = np.array([s[1] for s in result.scores])
    lo = float(min(train.min(), test.min()))
    hi = float(max(train.max(), test.max()))
    span = hi - lo or 1.0
    body = _axes(f"mAUC over {len(test)} random splits")

    def y(v):
        return _unit_xy(0, (v - lo) / span)[1]

    for k, (label, data) in enumerate((("train", train), ("test", test))):
        q1, med, q3 = np.percentile(data, [25, 50, 75])
        cx = PAD + (W - 2 * PAD) * (k + 1) / 3
        body.append(f'<line x1="{_n(cx)}" y1="{_n(y(data.min()))}" x2="{_n(cx)}" y2="{_n(y(data.max()))}" stroke="black"/>')
        body.append(
            f'<rect x="{_n(cx - 30)}" y="{_n(y(q3))}" width="60" height="{_n(y(q1) - y(q3))}" fill="#cfe2f3" stroke="black"/>'
        )
        body.append(f'<line x1="{_n(cx - 30)}" y1="{_n(y(med))}" x2="{_n(cx + 30)}" y2="{_n(y(med))}" stroke="black" stroke-width="2"/>')
        body.append(_text(cx, H - PAD + 16, label, anchor="middle"))
    body += [_text(PAD - 4, y(lo), short(lo), 9, "end"), _text(PAD - 4, y(hi), short(hi), 9, "end")]
    return _svg(W, H, body)


def _dot_plot_svg(result: GridResult) -> str:
    rows = [r for r in result.rows if r.scores]
    values = [s for r in rows for s in r.scores]
    lo, hi = min(values), max(values)
    span = hi - lo or 1.0
    body = _axes(f"grid scores ({result.protocol})")
    for k, row in enumerate(rows):
        x = PAD + (W - 2 * PAD) * (k + 0.5) / len(rows)
        for s in row.scores:
            yy = _unit_xy(0, (s - lo) / span)[1]
            body.append(f'<circle cx="{_n(x)}" cy="{_n(yy)}" r="2.5" fill="#1f77b4"/>')
    body += [_text(PAD - 4, H - PAD, short(lo), 9, "end"), _text(PAD - 4, PAD, short(hi), 9, "end"),
             _text(W / 2, H - 8, "configurations, best first", anchor="middle")]
    return _svg(W, H, body)


def _heatstrip_svg(table: ForecastTable) -> str:
    """Rows are patients, columns months; each cell is the predicted class."""
    cell_w, cell_h, left = 4, 4, 70
    pred = table.predicted
    colours = list(SEVERITY_COLOURS.values())
    width = left + cell_w * table.horizon + 10
    height = PAD + cell_h * len(table.patient_ids) + 20
    body = [f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
            _text(left, PAD / 2, f"predicted diagnosis, months 1-{table.horizon}")]
    for i in range(len(table.patient_ids)):
        yy = PAD + cell_h * i
        m = 0
        # merge runs of equal classes into one rect
        while m < table.horizon:
            end = m
            while end + 1 < table.horizon and pred[i, end + 1] == pred[i, m]:
                end += 1
            body.append(
                f'<rect x="{left + cell_w * m}" y="{yy}" width="{cell_w * (end - m + 1)}" height="{cell_h}" fill="{colours[pred[i, m]]}"/>'
            )
            m = end + 1
    return _svg(width, height, body)


def _trajectory_svg(patient_id: str, probs: np.ndarray, colour: str) -> str:
    horizon = len(probs)
    body = _axes(f"{patient_id}: predicted likelihood by month")
    for cls, label in zip(CLASSES, CLASS_LABELS):
        xs = [(m / (horizon - 1) if horizon > 1 else 0.5) for m in range(horizon)]
        body.append(_polyline([_unit_xy(x, p) for x, p in zip(xs, probs[:, int(cls)])], colour, CLASS_DASH[cls]))
        body.append(_text(W - PAD + 4, _unit_xy(1, probs[-1, int(cls)])[1], label, 9))
    body += [_text(W / 2, H - 8, f"months 1-{horizon}", anchor="middle"), _text(PAD - 4, PAD, "1", 9, "end"),
             _text(PAD - 4, H - PAD, "0", 9, "end")]
    return _svg(W, H, body)
