import csv
import hashlib
import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from adprog.cohort import Diagnosis
from adprog.evaluation import CvReport, FoldResult, ForecastTable, GridResult, GridRow, SplitScore, SplitsResult
from adprog.metrics import ScoredSample
from adprog.report import SEVERITY_COLOURS, ReportBundle, severity_colour

SVG_NS = "{http://www.w3.org/2000/svg}"


def cv_report(i, rng):
    folds = [FoldResult(f, 90, 10, float(rng.uniform(0.9, 1)), float(rng.uniform(0.7, 0.99))) for f in range(7)]
    return CvReport(7, "patient", folds, {"features": f"G{8 + i % 3}", "mode": "pairs", "seed": i})


def forecast(n_patients, horizon, seed=0):
    probs = np.random.default_rng(seed).dirichlet(np.ones(3), size=(n_patients, horizon))
    return ForecastTable([f"P{i:03d}" for i in range(n_patients)], probs)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def manifest(path):
    return {e["path"]: e["sha256"] for e in json.loads((path / "manifest.json").read_text())["files"]}


def test_cv_table_rows_sorted(tmp_path):
    rng = np.random.default_rng(0)
    reports = [cv_report(i, rng) for i in range(12)]
    bundle = ReportBundle(tmp_path)
    bundle.emit_cv_table(reports, [f"cfg{i}" for i in range(12)])
    rows = read_csv(tmp_path / "cv_table.csv")
    assert rows[0] == ["config", "train_mauc", "test_mauc", "test_sd"]
    assert len(rows) == 13
    tests = [float(r[2]) for r in rows[1:]]
    assert tests == sorted(tests, reverse=True)
    by_label = {r[0]: r for r in rows[1:]}
    for i, rep in enumerate(reports):
        row = by_label[f"cfg{i}"]
        assert float(row[1]) == rep.mean_train and float(row[2]) == rep.mean_test and float(row[3]) == rep.test_sd


def test_cv_table_requires_reports(tmp_path):
    with pytest.raises(ValueError):
        ReportBundle(tmp_path).emit_cv_table([])


def test_checksums_stable_and_manifest_complete(tmp_path):
    rng = np.random.default_rng(1)
    reports = [cv_report(i, rng) for i in range(3)]
    digests = []
    for name in ("a", "b"):
        bundle = ReportBundle(tmp_path / name)
        bundle.emit_cv_table(reports)
        bundle.emit_trajectories(forecast(3, 12), {"P000": [Diagnosis.NL]})
        bundle.finalize()
        digests.append((tmp_path / name / "manifest.json").read_bytes())
        listed = manifest(tmp_path / name)
        on_disk = {
            os.path.relpath(os.path.join(d, f), tmp_path / name).replace(os.sep, "/")
            for d, _, files in os.walk(tmp_path / name) for f in files
        } - {"manifest.json"}
        assert set(listed) == on_disk
        for rel, digest in listed.items():
            assert hashlib.sha256((tmp_path / name / rel).read_bytes()).hexdigest() == digest
    assert digests[0] == digests[1]


def test_manifest_merges_across_bundles(tmp_path):
    first = ReportBundle(tmp_path)
    first.write_text("one.txt", "1")
    first.finalize()
    second = ReportBundle(tmp_path)
    second.write_text("two.txt", "2")
    second.finalize()
    assert set(manifest(tmp_path)) == {"one.txt", "two.txt"}


def test_no_manifest_before_finalize(tmp_path):
    bundle = ReportBundle(tmp_path)
    bundle.emit_forecast(forecast(1, 2))
    assert not (tmp_path / "manifest.json").exists()


def test_forecast_long_format_9240_rows(tmp_path):
    table = forecast(110, 84)
    ReportBundle(tmp_path, formats=("csv",)).emit_trajectories(table)
    rows = read_csv(tmp_path / "forecast.csv")
    assert rows[0] == ["patient_id", "month", "p_NL", "p_MCI", "p_DEM", "argmax"]
    assert len(rows) - 1 == 9240
    got = np.array([[float(v) for v in r[2:5]] for r in rows[1:]])
    assert np.max(np.abs(got - table.probs.reshape(-1, 3))) <= 1e-12
    assert [int(r[5]) for r in rows[1:]] == table.predicted.reshape(-1).tolist()


def test_severity_colours():
    assert severity_colour([Diagnosis.NL, Diagnosis.NL]) == SEVERITY_COLOURS[Diagnosis.NL] == "#2ca02c"
    assert severity_colour([Diagnosis.NL, Diagnosis.DEMENTIA, Diagnosis.MCI]) == SEVERITY_COLOURS[Diagnosis.DEMENTIA]


def test_trajectory_svgs_parse_and_use_label_colour(tmp_path):
    table = forecast(2, 84)
    ReportBundle(tmp_path).emit_trajectories(table, {"P000": [Diagnosis.NL] * 3, "P001": [Diagnosis.MCI]})
    root = ET.parse(tmp_path / "trajectories" / "P000.svg").getroot()
    strokes = {p.get("stroke") for p in root.iter(f"{SVG_NS}polyline")}
    assert strokes == {"#2ca02c"}
    assert len(list(root.iter(f"{SVG_NS}polyline"))) == 3
    ET.parse(tmp_path / "heatstrip.svg")


def test_scores_emit_parseable_files(tmp_path):
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(3), size=30)
    samples = [ScoredSample(tuple(p), Diagnosis(i % 3)) for i, p in enumerate(probs)]
    bundle = ReportBundle(tmp_path)
    bundle.emit_predictions(samples)
    bundle.emit_confusion(samples)
    bundle.emit_roc(samples)
    splits = SplitsResult([SplitScore(i, 0.9 + i / 100, 0.8 + i / 100) for i in range(5)] + [SplitScore(5, skipped="x")],
                          0.7, {})
    bundle.emit_splits(splits)
    grid = GridResult([GridRow(0, 1e-4, 1e-3, (50,), [0.9, 0.92]), GridRow(1, 1e-2, 1e-3, (100,), [], "boom")], 3, "split", {})
    bundle.emit_grid(grid)
    for name in ("confusion.svg", "roc.svg", "splits.svg", "grid.svg"):
        ET.parse(tmp_path / name)
    pred = read_csv(tmp_path / "predictions.csv")
    got = np.array([[float(v) for v in r[2:5]] for r in pred[1:]])
    assert np.max(np.abs(got - probs)) <= 1e-12
    conf = read_csv(tmp_path / "confusion.csv")
    assert sum(int(v) for r in conf[1:] for v in r[1:]) == 30
    roc = read_csv(tmp_path / "roc_NL.csv")
    assert roc[1] == ["0", "0"] and roc[-1] == ["1", "1"]
    grid_rows = read_csv(tmp_path / "grid.csv")
    assert grid_rows[1][1] == "0" and grid_rows[2][-1] == "boom"
    assert read_csv(tmp_path / "splits.csv")[-1][-1] == "x"


def test_unwritable_directory_raises(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        ReportBundle(blocker / "sub").emit_forecast(forecast(1, 1))


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ValueError):
        ReportBundle(tmp_path, formats=("pdf",))
