"""``adprog`` command line: ingest -> transform -> train -> evaluate -> report.

Settings come from flags first, then an optional INI file (``--config``), then
built-in defaults. The INI file may hold [run], [mlp] and [grid] sections as
well as the ingest schema sections ([columns], [diagnosis], [race], [missing],
[options]).

Exit codes: 0 success, 1 usage or configuration error, 2 data error (including
missing files), 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from pathlib import Path

from adprog import __version__
from adprog import evaluation as ev
from adprog import ingest, model, synth
from adprog.allpairs import MODES, transform, write_matrix_csv
from adprog.cohort import CLASS_LABELS, DataError, Diagnosis, feature_group, months_between
from adprog.metrics import ScoredSample, mauc, mauc_arrays, per_class_auc
from adprog.report import FORMATS, ReportBundle

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
SEED_ENV = "ADPROG_SEED"

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------------
# settings


class Settings:
    """Flag value if given, else the config file value, else the default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = configparser.ConfigParser(interpolation=None)
        self.config.optionxform = str
        if getattr(args, "config", None):
            path = Path(args.config)
            if not path.is_file():
                raise FileNotFoundError(f"config file not found: {path}")
            try:
                self.config.read(path, encoding="utf-8")
            except configparser.Error as exc:
                raise UsageError(f"invalid config {path}: {exc}") from None

    def get(self, name: str, default=None, cast=str, section: str = "run"):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        if self.config.has_option(section, name):
            raw = self.config.get(section, name)
            try:
                return cast(raw)
            except ValueError:
                raise UsageError(f"config [{section}] {name}: bad value {raw!r}") from None
        return default

    def seed(self) -> int:
        value = getattr(self.args, "seed", None)
        source = "--seed"
        if value is None and self.config.has_option("run", "seed"):
            value, source = self.config.get("run", "seed"), "config [run] seed"
        if value is None and os.environ.get(SEED_ENV):
            value, source = os.environ[SEED_ENV], SEED_ENV
        if value is None:
            raise UsageError(f"this command is stochastic: pass --seed, set [run] seed, or set {SEED_ENV}")
        try:
            seed = int(value)
        except ValueError:
            raise UsageError(f"{source}: seed must be an unsigned integer, got {value!r}") from None
        if seed < 0:
            raise UsageError(f"{source}: seed must be an unsigned integer, got {seed}")
        return seed

    def schema(self) -> ingest.Schema:
        return ingest.Schema.from_parser(self.config)

    def bundle(self) -> ReportBundle:
        formats = self.get("formats", ",".join(FORMATS))
        try:
            return ReportBundle(self.get("out_dir", "adprog-out"), [f.strip() for f in formats.split(",") if f.strip()])
        except ValueError as exc:
            raise UsageError(str(exc)) from None


def _hidden(text: str) -> tuple[int, ...]:
    return tuple(int(h) for h in str(text).replace("x", ",").split(",") if h.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _hidden_list(text: str) -> tuple[tuple[int, ...], ...]:
    """'50;100;200' or '50,50;100' -> ((50,), (100,), (200,)) etc."""
    return tuple(_hidden(part) for part in str(text).split(";") if part.strip())


def _bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


MLP_KEYS = {
    "hidden_sizes": _hidden,
    "alpha": float,
    "learning_rate": float,
    "batch_size": int,
    "max_epochs": int,
    "solver": str,
    "tol": float,
    "n_iter_no_change": int,
    "early_stopping": _bool,
    "validation_fraction": float,
    "patience": int,
}


def hyperparams(settings: Settings, seed: int = 0) -> model.MlpHyperparams:
    if settings.config.has_section("mlp"):
        unknown = set(settings.config.options("mlp")) - set(MLP_KEYS)
        if unknown:
            raise UsageError(f"config [mlp]: unknown keys {sorted(unknown)}")
    values = {key: settings.get(key, None, cast, section="mlp") for key, cast in MLP_KEYS.items()}
    early = values.pop("early_stopping")
    fraction = values.pop("validation_fraction")
    patience = values.pop("patience")
    kwargs = {k: v for k, v in values.items() if v is not None}
    try:
        if early:
            stop = model.EarlyStopping()
            kwargs["early_stop"] = model.EarlyStopping(fraction or stop.validation_fraction, patience or stop.patience)
        return model.MlpHyperparams(seed=seed, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid hyperparameters: {exc}") from None


def _group(settings: Settings, name: str | None = None):
    try:
        return feature_group(name or settings.get("features", "G15"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _mode(settings: Settings, name: str | None = None) -> str:
    mode = name or settings.get("mode", "pairs")
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _records(settings: Settings, path: str | None, what: str = "--input", imputed: bool = True):
    records = ingest.parse_csv(_existing(path, what), settings.schema())
    if imputed:
        policy = settings.get("impute", "forward-fill-then-drop")
        if policy not in ingest.IMPUTE_POLICIES + ("forward-fill",):
            raise UsageError(f"unknown imputation policy {policy!r}; expected one of {ingest.IMPUTE_POLICIES}")
        records = ingest.impute(records, policy)
    return records


def _lb2_lb4(settings: Settings, args, need_lb4: bool = True):
    """Held-out cohort either from --lb2/--lb4 files or by splitting --input."""
    if args.lb2:
        lb2 = _records(settings, args.lb2, "--lb2")
        lb4 = ingest.parse_csv(_existing(args.lb4, "--lb4"), settings.schema()) if (args.lb4 or need_lb4) else None
        return lb2, lb4
    if args.input:
        split = ingest.split_tadpole(_records(settings, args.input, imputed=False))
        return ingest.impute(split.lb2, settings.get("impute", "forward-fill-then-drop")), split.lb4
    raise UsageError("pass --lb2 (and --lb4) or --input to split")


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args, settings: Settings) -> int:
    values = {}
    if args.spec:
        with open(_existing(args.spec, "--spec"), encoding="utf-8") as fh:
            values = json.load(fh)
    if args.n_patients is not None:
        values["n_patients"] = args.n_patients
    if args.seed is not None or "seed" not in values:
        values["seed"] = settings.seed()
    try:
        spec = synth.CohortSpec.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid cohort spec: {exc}") from None
    bundle = settings.bundle()
    out = Path(args.out) if args.out else bundle.out_dir / "cohort.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    records = synth.generate(spec)
    synth.export_csv(records, out)
    bundle.register(out)
    bundle.finalize()
    print(f"wrote {len(records)} patients, {sum(r.n_exams for r in records)} exams to {out}")
    return EXIT_OK


def cmd_ingest(args, settings: Settings) -> int:
    path = _existing(args.input, "--input")
    bundle = settings.bundle()
    if args.inspect:
        table = ingest.inspect_missingness(path, settings.schema())
        bundle.write_csv("missingness.csv", ["column", "n_rows", "n_missing", "fraction_missing"],
                         [(r["column"], r["n_rows"], r["n_missing"], r["fraction_missing"]) for r in table])
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["column", "n_rows", "n_missing", "fraction_missing"])
        for r in table:
            writer.writerow([r["column"], r["n_rows"], r["n_missing"], format(r["fraction_missing"], ".17g")])
    records = ingest.parse_csv(path, settings.schema())
    print(f"{len(records)} patients, {sum(r.n_exams for r in records)} exams", file=sys.stderr)
    if args.split:
        split = ingest.split_tadpole(records)
        for name, part in (("lb1", split.lb1), ("lb2", split.lb2), ("lb4", split.lb4)):
            out = bundle.out_dir / f"{name}.csv"
            out.parent.mkdir(parents=True, exist_ok=True)
            ingest.write_csv(part, out)
            bundle.register(out)
            print(f"{name}: {len(part)} patients -> {out}", file=sys.stderr)
    bundle.finalize()
    return EXIT_OK


def cmd_transform(args, settings: Settings) -> int:
    records = _records(settings, args.input)
    group, mode = _group(settings), _mode(settings)
    matrix = transform(records, group, mode)
    bundle = settings.bundle()
    bundle.out_dir.mkdir(parents=True, exist_ok=True)
    matrix_path, prov_path = bundle.out_dir / "matrix.csv", bundle.out_dir / "provenance.csv"
    write_matrix_csv(matrix, matrix_path, prov_path)
    bundle.register(matrix_path)
    bundle.register(prov_path)
    bundle.write_json("transform_report.json", {"features": group.name, "mode": mode, **vars(matrix.report)})
    bundle.finalize()
    r = matrix.report
    print(f"{r.emitted} rows from {r.candidates} candidates "
          f"(skipped: {r.skipped_no_target_dx} no target dx, {r.skipped_missing_features} missing features)")
    return EXIT_OK


def cmd_train(args, settings: Settings) -> int:
    seed = settings.seed()
    records = _records(settings, args.input)
    matrix = transform(records, _group(settings), _mode(settings))
    fitted = model.fit(matrix, hyperparams(settings, seed))
    bundle = settings.bundle()
    bundle.write_bytes(args.model_name, model.serialize(fitted))
    bundle.finalize()
    probs = model.predict_proba(fitted, matrix.x)
    print(f"trained on {len(matrix)} rows; training mAUC {mauc_arrays(probs, matrix.y):.4f}")
    return EXIT_OK


def cmd_cv(args, settings: Settings) -> int:
    seed = settings.seed()
    records = _records(settings, args.input)
    groups = [g.strip() for g in settings.get("features", "G15").split(",")]
    modes = [m.strip() for m in settings.get("mode", "pairs").split(",")]
    k = settings.get("k", 7, int)
    grouping = settings.get("grouping", "patient")
    if grouping not in ev.GROUPINGS:
        raise UsageError(f"unknown grouping {grouping!r}; expected one of {ev.GROUPINGS}")
    hp = hyperparams(settings)
    jobs = settings.get("jobs", 1, int)
    reports = []
    for g in groups:
        for m in modes:
            rep = ev.cross_validate(records, _group(settings, g), _mode(settings, m), hp, k, grouping, seed, jobs)
            reports.append(rep)
            print(f"{g}/{m}: train {rep.mean_train:.4f} test {rep.mean_test:.4f} sd {rep.test_sd:.4f}"
                  + (f"  [{rep.note}]" if rep.note else ""))
    bundle = settings.bundle()
    bundle.emit_cv_table(reports)
    bundle.finalize()
    return EXIT_OK


def cmd_splits(args, settings: Settings) -> int:
    seed = settings.seed()
    records = _records(settings, args.input)
    result = ev.random_splits(records, _group(settings), _mode(settings), hyperparams(settings),
                              settings.get("n_splits", 100, int), settings.get("fraction", 0.7, float),
                              seed, settings.get("jobs", 1, int))
    bundle = settings.bundle()
    bundle.emit_splits(result)
    bundle.finalize()
    tests = [s[1] for s in result.scores]
    if tests:
        print(f"{len(tests)} splits, mean test mAUC {sum(tests) / len(tests):.4f}, {len(result.skipped)} skipped")
    return EXIT_OK


def cmd_grid(args, settings: Settings) -> int:
    seed = settings.seed()
    records = _records(settings, args.input)
    grids = {}
    for key, cast in (("alpha", _floats), ("learning_rate", _floats), ("hidden_sizes", _hidden_list)):
        value = settings.get(f"grid_{key}", None, cast)
        if value is None and settings.config.has_option("grid", key):
            raw = settings.config.get("grid", key)
            try:
                value = cast(raw)
            except ValueError:
                raise UsageError(f"config [grid] {key}: bad value {raw!r}") from None
        if value is not None:
            grids[key] = value
    protocol = settings.get("protocol", "split")
    lb2 = lb4 = None
    if protocol == "forward":
        if args.lb2:
            lb2, lb4 = _lb2_lb4(settings, args)
        else:
            # split --input: train on LB1, score LB2 -> LB4
            split = ingest.split_tadpole(_records(settings, args.input, imputed=False))
            policy = settings.get("impute", "forward-fill-then-drop")
            records, lb2, lb4 = ingest.impute(split.lb1, policy), ingest.impute(split.lb2, policy), split.lb4
    try:
        result = ev.grid_search(records, _group(settings), _mode(settings), grids, settings.get("repeats", 5, int),
                                protocol, seed, hyperparams(settings), lb2, lb4, settings.get("k", 7, int),
                                settings.get("fraction", 0.7, float), settings.get("jobs", 1, int))
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(str(exc)) from None
    bundle = settings.bundle()
    bundle.emit_grid(result)
    bundle.finalize()
    best = result.rows[0]
    print(f"{result.n_runs} runs; best alpha={best.alpha} lr={best.learning_rate} hidden={best.hidden_sizes} "
          f"mean mAUC {best.mean:.4f}")
    return EXIT_OK


def _load_model(args) -> model.MlpModel:
    return model.load(_existing(args.model, "--model"))


def _emit_scores(bundle: ReportBundle, samples, ids=None, months=None) -> dict:
    bundle.emit_predictions(samples, ids, months)
    bundle.emit_confusion(samples)
    bundle.emit_roc(samples)
    classes = {s.actual for s in samples}
    summary = {"n_samples": len(samples), "mauc": mauc(samples) if len(classes) >= 2 else None,
               "per_class_auc": {CLASS_LABELS[int(c)]: v for c, v in per_class_auc(samples).items()}}
    return summary


def cmd_evaluate(args, settings: Settings) -> int:
    fitted = _load_model(args)
    lb2, lb4 = _lb2_lb4(settings, args)
    result = ev.evaluate_forward(fitted, lb2, lb4)
    if not result.samples:
        raise DataError("no LB4 exam could be scored")
    bundle = settings.bundle()
    by_id = {r.patient_id: r for r in lb2}
    months = [months_between(t.exam_date, by_id[t.patient_id].exams[-1].exam_date) for t in result.targets]
    summary = _emit_scores(bundle, result.samples, [t.patient_id for t in result.targets], months)
    summary["excluded"] = result.excluded
    bundle.write_json("evaluation.json", summary)
    bundle.finalize()
    score = summary["mauc"]
    print(f"{len(result.samples)} LB4 exams scored; mAUC {'n/a' if score is None else format(score, '.4f')}")
    return EXIT_OK


def cmd_forecast(args, settings: Settings) -> int:
    fitted = _load_model(args)
    lb2, lb4 = _lb2_lb4(settings, args, need_lb4=False)
    horizon = settings.get("horizon", 84, int)
    if horizon < 1:
        raise UsageError("--horizon must be >= 1")
    table = ev.forecast_monthly(fitted, lb2, horizon)
    if not table.patient_ids:
        raise DataError("no patient has a usable LB2 exam to forecast from")
    actuals = None
    if lb4 is not None:
        actuals = {r.patient_id: [e.diagnosis for e in r.exams] for r in lb4}
    bundle = settings.bundle()
    bundle.emit_trajectories(table, actuals)
    bundle.finalize()
    print(f"forecast {len(table.patient_ids)} patients x {table.horizon} months")
    return EXIT_OK


def _diagnosis(text: str) -> Diagnosis:
    """Class code (0/1/2) or label (NL/MCI/DEM, DEMENTIA also accepted)."""
    label = text.strip().upper()
    if label == "DEMENTIA":
        label = "DEM"
    if label in CLASS_LABELS:
        return Diagnosis(CLASS_LABELS.index(label))
    return Diagnosis(int(label))


def cmd_score(args, settings: Settings) -> int:
    path = _existing(args.predictions, "--predictions")
    samples = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"prob_NL", "prob_MCI", "prob_DEM", "actual"}
        if not needed <= set(reader.fieldnames or ()):
            raise DataError(f"{path}: expected columns {sorted(needed)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                probs = (float(row["prob_NL"]), float(row["prob_MCI"]), float(row["prob_DEM"]))
                samples.append(ScoredSample(probs, _diagnosis(row["actual"])))
            except ValueError as exc:
                raise DataError(f"{path} row {lineno}: {exc}") from None
    if not samples:
        raise DataError(f"{path}: no predictions")
    bundle = settings.bundle()
    bundle.emit_confusion(samples)
    bundle.emit_roc(samples)
    classes = {s.actual for s in samples}
    score = mauc(samples) if len(classes) >= 2 else None
    bundle.write_json("score.json", {"n_samples": len(samples), "mauc": score})
    bundle.finalize()
    print(f"mAUC {'n/a' if score is None else format(score, '.4f')} over {len(samples)} predictions")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [run], [mlp], [grid] and schema sections")
    common.add_argument("--out-dir", dest="out_dir", help="report directory (default adprog-out)")
    common.add_argument("--formats", help="comma list of report formats among csv,json,svg (default all)")
    common.add_argument("--seed", type=int, help=f"master seed (falls back to config, then ${SEED_ENV})")
    common.add_argument("--jobs", type=int, help="worker processes for CV, splits and grid (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    data = _Parser(add_help=False)
    data.add_argument("--input", help="cohort CSV")
    data.add_argument("--features", help="feature group: G8, G11 or G15 (cv accepts a comma list)")
    data.add_argument("--mode", help="pairs or triplets (cv accepts a comma list)")
    data.add_argument("--impute", help="forward-fill-then-drop (default) or drop-row")

    mlp = _Parser(add_help=False)
    mlp.add_argument("--hidden", dest="hidden_sizes", type=_hidden, help="hidden layer sizes, e.g. 100 or 50,50")
    mlp.add_argument("--alpha", type=float, help="L2 penalty (default 1e-4)")
    mlp.add_argument("--learning-rate", dest="learning_rate", type=float, help="step size (default 1e-3)")
    mlp.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size (default 64)")
    mlp.add_argument("--max-epochs", dest="max_epochs", type=int, help="epoch cap (default 300)")
    mlp.add_argument("--solver", choices=("adam", "sgd"), help="optimizer (default adam)")
    mlp.add_argument("--early-stopping", dest="early_stopping", action="store_const", const=True,
                     help="hold out 10%% of patients and stop after 15 epochs without validation improvement")

    held_out = _Parser(add_help=False)
    held_out.add_argument("--lb2", help="CSV of held-out patients' early exams")
    held_out.add_argument("--lb4", help="CSV of the same patients' later exams")

    parser = _Parser(prog="adprog", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"adprog {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, func, help_text, parents):
        p = sub.add_parser(name, help=help_text, description=help_text, parents=[common, *parents])
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic cohort CSV", [])
    p.add_argument("--spec", help="JSON file of CohortSpec fields")
    p.add_argument("--n-patients", dest="n_patients", type=int, help="override the number of patients")
    p.add_argument("--out", help="output CSV (default <out-dir>/cohort.csv)")

    p = add("ingest", cmd_ingest, "parse a cohort CSV; optionally report missingness and split LB1/LB2/LB4", [])
    p.add_argument("--input", help="cohort CSV")
    p.add_argument("--inspect", action="store_true", help="write missingness.csv and print per-column counts")
    p.add_argument("--split", action="store_true", help="write lb1.csv, lb2.csv and lb4.csv")

    add("transform", cmd_transform, "write the All-Pairs matrix and its provenance", [data])

    p = add("train", cmd_train, "fit an MLP and save it", [data, mlp])
    p.add_argument("--model-name", dest="model_name", default="model.json", help="file name inside --out-dir")

    p = add("cv", cmd_cv, "k-fold cross-validation; writes cv_table.csv", [data, mlp])
    p.add_argument("--k", type=int, help="number of folds (default 7)")
    p.add_argument("--grouping", choices=ev.GROUPINGS, help="fold by patient (default) or by row")

    p = add("splits", cmd_splits, "repeated random patient-level splits; writes splits.csv", [data, mlp])
    p.add_argument("--n", dest="n_splits", type=int, help="number of splits (default 100)")
    p.add_argument("--fraction", type=float, help="training fraction (default 0.7)")

    p = add("grid", cmd_grid, "hyperparameter grid search; writes grid.csv", [data, mlp, held_out])
    p.add_argument("--repeats", type=int, help="runs per configuration (default 5)")
    p.add_argument("--protocol", choices=ev.PROTOCOLS, help="split (default), cv or forward")
    p.add_argument("--alphas", dest="grid_alpha", type=_floats, help="comma list (default 1e-4,1e-3,1e-2)")
    p.add_argument("--learning-rates", dest="grid_learning_rate", type=_floats, help="comma list (default 1e-4,1e-3,1e-2)")
    p.add_argument("--hidden-grid", dest="grid_hidden_sizes", type=_hidden_list,
                   help="';'-separated layer specs (default 50;100;200)")
    p.add_argument("--k", type=int, help="folds for the cv protocol (default 7)")
    p.add_argument("--fraction", type=float, help="training fraction for the split protocol (default 0.7)")

    p = add("evaluate", cmd_evaluate, "score a model on LB4 from LB2 history", [held_out])
    p.add_argument("--model", help="model file written by train")
    p.add_argument("--input", help="cohort CSV to split instead of --lb2/--lb4")
    p.add_argument("--impute", help="imputation policy for LB2")

    p = add("forecast", cmd_forecast, "monthly diagnosis probabilities for each LB2 patient", [held_out])
    p.add_argument("--model", help="model file written by train")
    p.add_argument("--input", help="cohort CSV to split instead of --lb2")
    p.add_argument("--impute", help="imputation policy for LB2")
    p.add_argument("--horizon", type=int, help="months to forecast (default 84)")

    p = add("score", cmd_score, "mAUC, confusion matrix and ROC curves from a predictions CSV", [])
    p.add_argument("--predictions", help="CSV with prob_NL, prob_MCI, prob_DEM and actual columns")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("adprog: a command is required (see adprog --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="adprog: %(levelname)s: %(message)s")
        return args.func(args, Settings(args))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except model.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
