"""Strategy grid runner: data, paths, per-strategy heads, evaluation, reports.

A strategy is a ``+``-joined set of tokens drawn from three groups, applied
in a fixed order: at most one sampler (``smote``, ``undersample``,
``oversample``), then the in-training options (``mixup``, ``focal``), then
at most one ensemble wrapper (``bagging``, ``boosting``).  The empty
strategy is called ``multipath-ce``.

For every seed the binary paths are trained once on the training split and
shared by every strategy row; each row then trains its own head.
"""

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses
from .checkpoint import save_checkpoint
from .dataset import load_dataset, split
from .ensembles import WeightedEnsemble, adaboost_train, bagging_train
from .errors import ConfigError, PopulationError, TrainingError
from .dataset import LabeledDataset
from .metrics import class_report, confusion_matrix
from .multipath import (
    HeadClassifier,
    TrainConfig,
    assemble_multipath,
    build_head,
    build_path,
    default_path_specs,
    PathSpec,
    train_binary_path,
    train_head,
    train_multipath,
)
from .sampling import random_oversample, random_undersample, smote_dataset
from .synthcryo import DatasetManifest, generate_dataset

SAMPLERS = ("smote", "undersample", "oversample")
TRAINING = ("mixup", "focal")
ENSEMBLES = ("bagging", "boosting")
PLAIN = "multipath-ce"
BENCH_STRATEGIES = (
    PLAIN, "smote", "undersample", "bagging", "boosting", "mixup", "focal",
    "smote+bagging", "smote+boosting", "mixup+focal",
)
WORKERS_ENV = "CRYOIMB_WORKERS"

# spawn-key namespaces for the per-seed RNG streams
_PATH_STREAM = 0
_ROW_STREAM = 1


@dataclass(frozen=True)
class Strategy:
    sampler: str = None
    mixup: bool = False
    focal: bool = False
    ensemble: str = None

    @property
    def name(self):
        parts = ([self.sampler] if self.sampler else []) + [
            t for t, on in (("mixup", self.mixup), ("focal", self.focal)) if on
        ] + ([self.ensemble] if self.ensemble else [])
        return "+".join(parts) or PLAIN


def parse_strategy(text):
    """Parse ``"smote+bagging"`` and the like; raises :class:`ConfigError`."""
    text = text.strip().lower()
    if text in ("", "plain", "ce", PLAIN):
        return Strategy()
    tokens = [t.strip() for t in text.split("+")]
    if len(set(tokens)) != len(tokens):
        raise ConfigError(f"strategy {text!r} repeats a component")
    samplers = [t for t in tokens if t in SAMPLERS]
    ensembles = [t for t in tokens if t in ENSEMBLES]
    unknown = [t for t in tokens if t not in SAMPLERS + TRAINING + ENSEMBLES]
    if unknown:
        raise ConfigError(f"strategy {text!r}: unknown component(s) {unknown}")
    if len(samplers) > 1:
        raise ConfigError(f"strategy {text!r} combines samplers {samplers}; pick one")
    if len(ensembles) > 1:
        raise ConfigError(f"strategy {text!r} combines ensembles {ensembles}; pick one")
    return Strategy(
        sampler=samplers[0] if samplers else None,
        mixup="mixup" in tokens,
        focal="focal" in tokens,
        ensemble=ensembles[0] if ensembles else None,
    )


@dataclass
class ExperimentConfig:
    manifest: DatasetManifest = field(default_factory=DatasetManifest)
    dataset_path: str = None  # load this file instead of generating
    strategies: list = field(default_factory=lambda: [PLAIN])
    seeds: list = field(default_factory=lambda: [0])
    train: TrainConfig = field(default_factory=TrainConfig)
    train_fraction: float = 0.8
    smote_n: int = None  # None: largest multiple of 100 not exceeding the majority
    smote_k: int = 5
    bagging_m: int = 5
    boosting_m: int = 5
    mixup_alpha: float = 0.2
    focal_gamma: float = 2.0
    focal_alpha: object = 0.25  # a number, a per-class list, or "inverse"
    path_specs: list = None  # list of PathSpec dicts; None uses the defaults
    out_dir: str = None
    workers: int = None

    def __post_init__(self):
        if isinstance(self.manifest, dict):
            self.manifest = DatasetManifest(**self.manifest)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.strategies = list(self.strategies)
        self.seeds = [int(s) for s in self.seeds]

    def validate(self):
        parsed = [parse_strategy(s) for s in self.strategies]
        names = [p.name for p in parsed]
        if not names:
            raise ConfigError("no strategies requested")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate strategies in {names}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if self.smote_k < 1:
            raise ConfigError("SMOTE needs at least one neighbour")
        if self.bagging_m < 1 or self.boosting_m < 1:
            raise ConfigError("ensemble sizes must be at least 1")
        if self.mixup_alpha <= 0:
            raise ConfigError("mixup alpha must be positive")
        if self.focal_gamma < 0:
            raise ConfigError("focal gamma must be non-negative")
        if isinstance(self.focal_alpha, str) and self.focal_alpha != "inverse":
            raise ConfigError(f"focal alpha must be a number, a list or 'inverse', got {self.focal_alpha!r}")
        if self.smote_n is not None and (self.smote_n < 0 or (self.smote_n >= 100 and self.smote_n % 100)):
            raise ConfigError(f"SMOTE amount {self.smote_n} must be below 100 or a multiple of 100")
        return parsed

    def to_dict(self):
        d = asdict(self)
        d["manifest"] = asdict(self.manifest)
        d["train"] = asdict(self.train)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


@dataclass
class ReportRow:
    strategy: str
    seed: int
    macro_f1: float
    macro_g_mean: float
    epochs: int
    wall_clock_s: float
    status: str = "ok"
    error: str = ""
    per_class: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    rows: list
    paths: list  # per seed, per path: binary F1 / G-mean on the held-out split
    config: dict
    predictions: list = field(default_factory=list)  # (seed, strategy, index, truth, pred)

    def summary(self):
        """Median macro F1 / G-mean over seeds for each strategy (failed rows skipped)."""
        out = {}
        for name in dict.fromkeys(r.strategy for r in self.rows):
            ok = [r for r in self.rows if r.strategy == name and r.status == "ok"]
            out[name] = {
                "macro_f1": float(np.median([r.macro_f1 for r in ok])) if ok else float("nan"),
                "macro_g_mean": float(np.median([r.macro_g_mean for r in ok])) if ok else float("nan"),
                "n_seeds": len(ok),
            }
        return out

    def to_dict(self):
        return {
            "rows": [asdict(r) for r in self.rows],
            "summary": self.summary(),
            "paths": self.paths,
            "config": self.config,
        }


def derive_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


def _focal_config(cfg, train):
    if cfg.focal_alpha == "inverse":
        alpha = losses.inverse_frequency_alpha(train.class_counts())
    else:
        alpha = cfg.focal_alpha
    return losses.FocalConfig(cfg.focal_gamma, alpha)


def _apply_sampler(name, data, cfg, rng):
    if name == "smote":
        return smote_dataset(data, rng, cfg.smote_n, cfg.smote_k)
    if name == "undersample":
        return random_undersample(data, rng)
    if name == "oversample":
        return random_oversample(data, rng)
    return data


def _load_data(cfg, seed):
    if cfg.dataset_path:
        return load_dataset(cfg.dataset_path)
    return generate_dataset(replace(cfg.manifest, seed=seed))


def _path_specs(cfg, n_classes, dim):
    if cfg.path_specs is None:
        return default_path_specs(n_classes, dim, cfg.train.feature_width)
    specs = [PathSpec.from_dict(d) for d in cfg.path_specs]
    if len(specs) != n_classes:
        raise ConfigError(f"{len(specs)} path specs for {n_classes} classes")
    return specs


def train_paths(train, cfg, seed):
    """Binary path classifiers for every class plus their held-out reports."""
    tc = replace(cfg.train, dim=train.dim)
    specs = _path_specs(cfg, train.n_classes, train.dim)
    rng = derive_rng(seed, _PATH_STREAM)
    classifiers, reports = [], []
    for spec in specs:
        path = build_path(spec, train.dim, rng)
        clf, rep = train_binary_path(path, train, spec.target_class, tc, rng)
        classifiers.append(clf)
        reports.append(rep)
    return specs, classifiers, reports


def _fit_row(strategy, classifiers, specs, train, cfg, rng):
    """Train one strategy row; returns a model or ensemble with ``predict_probs``."""
    tc = replace(cfg.train, dim=train.dim)
    data = _apply_sampler(strategy.sampler, train, cfg, rng)
    loss = "focal" if strategy.focal else "ce"
    focal = _focal_config(cfg, data) if strategy.focal else None
    mixup = losses.MixupConfig(cfg.mixup_alpha) if strategy.mixup else None
    frozen = tc.freeze_paths

    def fresh_model():
        # paths are deep-copied so unfrozen fine-tuning never leaks across rows
        paths = [c.path.copy() for c in classifiers] if not frozen else [c.path for c in classifiers]
        return assemble_multipath(paths, train.n_classes, rng, specs=specs, dim=train.dim,
                                  head_width=tc.head_width, frozen_paths=frozen)

    if strategy.ensemble is None:
        model, _ = train_multipath(fresh_model(), data, loss, mixup, tc, rng, focal)
        return model

    feature_space = frozen and mixup is None
    if feature_space:
        base = fresh_model()
        feats = LabeledDataset(base.features(data.volumes), data.labels, data.n_classes)
        width = feats.volumes.shape[1]

        def trainer(ds):
            head = build_head(width, ds.n_classes, rng, tc.head_width)
            train_head(head, ds.volumes, ds.labels, ds.n_classes, tc, rng, loss, focal)
            return HeadClassifier(head)
        fit_on = feats
    else:
        def trainer(ds):
            model, _ = train_multipath(fresh_model(), ds, loss, mixup, tc, rng, focal)
            return model
        fit_on = data

    if strategy.ensemble == "bagging":
        ens = bagging_train(trainer, cfg.bagging_m, fit_on, rng)
    else:
        ens = adaboost_train(trainer, cfg.boosting_m, fit_on, data.n_classes, rng)
    if feature_space:
        members = [base.with_head(m.head) for m in ens.members]
        ens = WeightedEnsemble(members, ens.weights, ens.n_classes, ens.kind, ens.history)
    return ens


def run_seed(cfg, seed, strategies=None):
    """All strategy rows for one seed: ``(rows, path_reports, predictions, models)``."""
    strategies = strategies or cfg.validate()
    data = _load_data(cfg, seed)
    train, test = split(data, cfg.train_fraction, True, seed)
    specs, classifiers, path_reports = train_paths(train, cfg, seed)
    rows, preds, models = [], [], {}
    for r, strategy in enumerate(strategies):
        rng = derive_rng(seed, _ROW_STREAM, r)
        t0 = time.perf_counter()
        try:
            model = _fit_row(strategy, classifiers, specs, train, cfg, rng)
        except (TrainingError, PopulationError, FloatingPointError) as exc:
            rows.append(ReportRow(strategy.name, seed, float("nan"), float("nan"), cfg.train.epochs,
                                  time.perf_counter() - t0, "failed", f"{type(exc).__name__}: {exc}"))
            continue
        pred = np.argmax(model.predict_probs(test.volumes), axis=-1)
        rep = class_report(confusion_matrix(pred, test.labels, test.n_classes))
        rows.append(ReportRow(
            strategy.name, seed, rep.macro_f1, rep.macro_g_mean, cfg.train.epochs,
            time.perf_counter() - t0, per_class=asdict(rep),
        ))
        preds += [(seed, strategy.name, i, int(t), int(p))
                  for i, (t, p) in enumerate(zip(test.labels, pred))]
        models[strategy.name] = model
    paths = [{"seed": seed, "target_class": p.target_class, "f1": p.f1, "g_mean": p.g_mean,
              "confusion": p.confusion} for p in path_reports]
    return rows, paths, preds, models


def _seed_job(args):
    cfg, seed = args
    rows, paths, preds, models = run_seed(cfg, seed)
    if cfg.out_dir:
        ckdir = os.path.join(cfg.out_dir, "checkpoints")
        os.makedirs(ckdir, exist_ok=True)
        for name, model in models.items():
            save_checkpoint(model, os.path.join(ckdir, f"{name}_seed{seed}.mpck"))
    return rows, paths, preds


def worker_count(cfg, n_jobs):
    cap = cfg.workers or os.environ.get(WORKERS_ENV) or os.cpu_count() or 1
    return max(1, min(int(cap), n_jobs))


def run_experiment(cfg):
    """Run every strategy for every seed and write artifacts to ``cfg.out_dir``.

    Invalid strategy sets raise :class:`ConfigError` before any training.
    Seeds run in parallel processes (capped by ``CRYOIMB_WORKERS``).
    """
    cfg.validate()
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
    jobs = [(cfg, s) for s in cfg.seeds]
    n = worker_count(cfg, len(jobs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_seed_job, jobs))
    else:
        results = [_seed_job(j) for j in jobs]
    report = ExperimentReport(
        rows=[r for res in results for r in res[0]],
        paths=[p for res in results for p in res[1]],
        config=cfg.to_dict(),
        predictions=[p for res in results for p in res[2]],
    )
    if cfg.out_dir:
        write_artifacts(report, cfg.out_dir)
    return report


# ---------------------------------------------------------------------------
# report files

CSV_COLUMNS = ("strategy", "macro_f1", "macro_g_mean", "seed", "epochs", "wall_clock_s")


def pct(x):
    """Fraction as a percentage with one decimal (``0.736`` gives ``"73.6"``)."""
    return "nan" if not np.isfinite(x) else f"{100.0 * x:.1f}"


def _csv_records(rows):
    for r in rows:
        yield [r.strategy, pct(r.macro_f1), pct(r.macro_g_mean), r.seed, r.epochs,
               f"{r.wall_clock_s:.2f}"]


def format_table(rows):
    header = ["strategy", "macro F1 (%)", "macro G-mean (%)", "seed", "epochs", "wall (s)"]
    body = [[str(v) for v in rec] for rec in _csv_records(rows)]
    for r, line in zip(rows, body):
        if r.status != "ok":
            line[0] += " [FAILED]"
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    fmt = lambda cells: "  ".join(  # noqa: E731
        c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
    )
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def format_summary(summary):
    header = ["strategy", "median F1 (%)", "median G-mean (%)", "seeds"]
    body = [[k, pct(v["macro_f1"]), pct(v["macro_g_mean"]), str(v["n_seeds"])]
            for k, v in summary.items()]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(cells, widths)))
             for cells in [header, ["-" * w for w in widths]] + body]
    return "\n".join(lines) + "\n"


def emit_report(rows, out_dir=None, summary=None):
    """CSV and aligned text versions of ``rows``; written to ``out_dir`` if given.

    Returns ``(csv_text, table_text)``.
    """
    if not rows:
        raise ValueError("no report rows")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(_csv_records(rows))
    csv_text = buf.getvalue()
    table = format_table(rows)
    if summary is not None:
        table += "\nmedian over seeds\n" + format_summary(summary)
    if out_dir:
        with open(os.path.join(out_dir, "report.csv"), "w") as fh:
            fh.write(csv_text)
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(table)
    return csv_text, table


def write_predictions(predictions, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "strategy", "index", "true", "pred"))
        w.writerows(predictions)


def read_predictions(path):
    with open(path, newline="") as fh:
        return [(int(r["seed"]), r["strategy"], int(r["index"]), int(r["true"]), int(r["pred"]))
                for r in csv.DictReader(fh)]


def write_artifacts(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    emit_report(report.rows, out_dir, report.summary())
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    write_predictions(report.predictions, os.path.join(out_dir, "predictions.csv"))
    with open(os.path.join(out_dir, "paths.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "path", "binary_f1", "binary_g_mean"))
        for p in report.paths:
            w.writerow((p["seed"], p["target_class"] + 1, pct(p["f1"]), pct(p["g_mean"])))


def recompute_metrics(predictions, n_classes):
    """Macro F1 / G-mean per ``(seed, strategy)`` from saved predictions."""
    groups = {}
    for seed, name, _, truth, pred in predictions:
        groups.setdefault((seed, name), ([], []))
        groups[(seed, name)][0].append(truth)
        groups[(seed, name)][1].append(pred)
    out = {}
    for key, (truth, pred) in groups.items():
        rep = class_report(confusion_matrix(pred, truth, n_classes))
        out[key] = (rep.macro_f1, rep.macro_g_mean)
    return out


def verify_report(out_dir, tol=1e-9):
    """Recompute every ok row of ``report.json`` from ``predictions.csv``.

    Returns a list of mismatch descriptions (empty when all rows agree).
    """
    with open(os.path.join(out_dir, "report.json")) as fh:
        stored = json.load(fh)
    n_classes = len(stored["config"]["manifest"]["n_per_class"])
    if stored["config"].get("dataset_path"):
        n_classes = len(stored["rows"][0]["per_class"].get("f1", [])) or n_classes
    fresh = recompute_metrics(read_predictions(os.path.join(out_dir, "predictions.csv")), n_classes)
    problems = []
    for row in stored["rows"]:
        if row["status"] != "ok":
            continue
        key = (row["seed"], row["strategy"])
        if key not in fresh:
            problems.append(f"{key}: no predictions saved")
            continue
        for name, value in zip(("macro_f1", "macro_g_mean"), fresh[key]):
            if abs(value - row[name]) > tol:
                problems.append(f"{key} {name}: stored {row[name]!r}, recomputed {value!r}")
    return problems


def rows_from_json(out_dir):
    with open(os.path.join(out_dir, "report.json")) as fh:
        stored = json.load(fh)
    return [ReportRow(**r) for r in stored["rows"]], stored["summary"]
