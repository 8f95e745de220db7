"""Command-line entry point: ``cryoimb <subcommand> ...``.

Exit codes: 0 success, 1 report verification mismatch, 2 configuration or
input error, 3 training failure.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .checkpoint import load_checkpoint
from .dataset import load_dataset, save_dataset
from .errors import ConfigError, FormatError, PopulationError, ShapeError, TrainingError
from .experiment import (
    BENCH_STRATEGIES,
    ExperimentConfig,
    emit_report,
    parse_strategy,
    rows_from_json,
    run_experiment,
    verify_report,
)
from .metrics import class_report, confusion_matrix
from .multipath import TrainConfig
from .sampling import smote_dataset
from .synthcryo import DESK_COUNTS, DatasetManifest, generate_dataset

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_TRAINING = 0, 1, 2, 3


def _int_list(text):
    out = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            lo, hi = part.split("-", 1)
            out += list(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    return out


def _focal_alpha(text):
    if text == "inverse":
        return text
    values = [float(v) for v in text.split(",")]
    return values[0] if len(values) == 1 else values


def _data_flags(p):
    p.add_argument("--dim", type=int, help="volume edge length (default 16)")
    p.add_argument("--counts", type=_int_list, help="per-class sample counts, e.g. 522,40,62,193")
    p.add_argument("--noise", type=float, help="Gaussian noise sigma")


def _experiment_flags(p):
    p.add_argument("--config", help="JSON experiment config; flags override it")
    p.add_argument("--data", help="CETV dataset file (default: generate per seed)")
    _data_flags(p)
    p.add_argument("--seeds", type=_int_list, help="seeds, e.g. 0-9 or 0,3,5")
    p.add_argument("--epochs", type=int, help="head training epochs")
    p.add_argument("--path-epochs", type=int, help="binary path training epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--finetune-all", action="store_true", help="train paths jointly with the head")
    p.add_argument("--smote-n", type=int, help="SMOTE amount in percent (default: auto)")
    p.add_argument("--smote-k", type=int, help="SMOTE neighbour count")
    p.add_argument("--mixup-alpha", type=float, help="Beta concentration for mixup")
    p.add_argument("--mixup-preset", choices=["beta0.1"], help="named mixup preset")
    p.add_argument("--focal-gamma", type=float)
    p.add_argument("--focal-alpha", type=_focal_alpha, help="number, comma list or 'inverse'")
    p.add_argument("--workers", type=int, help="parallel seed workers")
    p.add_argument("--out-dir", required=False, help="directory for reports and checkpoints")
    p.add_argument("--dump-defaults", action="store_true",
                   help="print the resolved config as JSON and exit")


def build_parser():
    parser = argparse.ArgumentParser(prog="cryoimb", description=__doc__.splitlines()[0])
    parser.add_argument("--dump-defaults", action="store_true",
                        help="print the default experiment config as JSON and exit")
    sub = parser.add_subparsers(dest="command")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--out", required=True)
    g.add_argument("--manifest", help="JSON manifest; flags override it")
    _data_flags(g)
    g.add_argument("--total", type=int, help="total samples at the default class ratios")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("smote", help="apply SMOTE to every non-majority class of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, help="amount in percent (default: auto)")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one strategy")
    _experiment_flags(t)
    t.add_argument("--strategy", help="e.g. smote+bagging; alternative to the flags below")
    samplers = t.add_argument_group("sampler (pick one)")
    samplers.add_argument("--smote", action="store_true")
    samplers.add_argument("--undersample", action="store_true")
    samplers.add_argument("--oversample", action="store_true")
    t.add_argument("--mixup", action="store_true")
    t.add_argument("--focal", action="store_true")
    t.add_argument("--bagging", type=int, metavar="M", help="bagging with M members")
    t.add_argument("--boosting", type=int, metavar="M", help="SAMME boosting with M rounds")

    b = sub.add_parser("bench", help="run the strategy grid over several seeds "
                                     "(seeds 0-9 and inverse-frequency focal alpha unless set)")
    _experiment_flags(b)
    b.add_argument("--strategies", help="comma-separated strategies (default: the full grid)")
    b.add_argument("--bagging-m", type=int)
    b.add_argument("--boosting-m", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--predictions", help="write per-sample predictions CSV here")

    r = sub.add_parser("report", help="recompute and print a run's report")
    r.add_argument("run_dir")
    r.add_argument("--tol", type=float, default=1e-9)
    return parser


def _strategy_from_flags(args):
    tokens = [n for n in ("smote", "undersample", "oversample", "mixup", "focal") if getattr(args, n)]
    if args.bagging is not None:
        tokens.append("bagging")
    if args.boosting is not None:
        tokens.append("boosting")
    if args.strategy:
        if tokens:
            raise ConfigError("use either --strategy or the individual strategy flags")
        return args.strategy
    return "+".join(tokens)


def config_from_args(args, strategies):
    if args.config:
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_json(fh.read())
    else:
        cfg = ExperimentConfig()
    m = cfg.manifest
    try:
        manifest = replace(
            m,
            dim=args.dim if args.dim is not None else m.dim,
            n_per_class=args.counts if args.counts is not None else m.n_per_class,
            noise_sigma=args.noise if args.noise is not None else m.noise_sigma,
        )
        tc = cfg.train
        train = replace(
            tc,
            epochs=args.epochs if args.epochs is not None else tc.epochs,
            path_epochs=args.path_epochs if args.path_epochs is not None else tc.path_epochs,
            lr=args.lr if args.lr is not None else tc.lr,
            momentum=args.momentum if args.momentum is not None else tc.momentum,
            batch_size=args.batch_size if args.batch_size is not None else tc.batch_size,
            freeze_paths=tc.freeze_paths and not args.finetune_all,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    updates = {"manifest": manifest, "train": train}
    for flag, key in (("data", "dataset_path"), ("seeds", "seeds"), ("smote_n", "smote_n"),
                      ("smote_k", "smote_k"), ("mixup_alpha", "mixup_alpha"),
                      ("focal_gamma", "focal_gamma"), ("focal_alpha", "focal_alpha"),
                      ("workers", "workers"), ("out_dir", "out_dir"),
                      ("bagging_m", "bagging_m"), ("boosting_m", "boosting_m"),
                      ("bagging", "bagging_m"), ("boosting", "boosting_m")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    if getattr(args, "mixup_preset", None) == "beta0.1":
        updates["mixup_alpha"] = 0.1
    if strategies is not None:
        updates["strategies"] = strategies
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def _run(cfg, args):
    if args.dump_defaults:
        print(cfg.to_json())
        return EXIT_OK
    if not cfg.out_dir:
        raise ConfigError("--out-dir is required")
    report = run_experiment(cfg)
    _, table = emit_report(report.rows, summary=report.summary() if len(cfg.seeds) > 1 else None)
    print(table, end="")
    failed = [r for r in report.rows if r.status != "ok"]
    for r in failed:
        print(f"row {r.strategy} seed {r.seed} failed: {r.error}", file=sys.stderr)
    return EXIT_TRAINING if failed else EXIT_OK


def cmd_gen_data(args):
    if args.manifest:
        with open(args.manifest) as fh:
            manifest = DatasetManifest.from_json(fh.read())
    else:
        manifest = DatasetManifest()
    counts = args.counts
    if args.total is not None:
        from .synthcryo import scaled_counts
        counts = scaled_counts(args.total)
    try:
        manifest = replace(
            manifest,
            dim=args.dim if args.dim is not None else manifest.dim,
            n_per_class=counts if counts is not None else manifest.n_per_class,
            noise_sigma=args.noise if args.noise is not None else manifest.noise_sigma,
            seed=args.seed if args.seed is not None else manifest.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    data = generate_dataset(manifest, workers=args.workers)
    save_dataset(data, args.out)
    with open(args.out + ".manifest.json", "w") as fh:
        fh.write(manifest.to_json())
    print(f"wrote {len(data)} samples, class counts {data.class_counts().tolist()}, to {args.out}")
    return EXIT_OK


def cmd_smote(args):
    data = load_dataset(args.data)
    out = smote_dataset(data, np.random.default_rng(args.seed), args.n, args.k)
    save_dataset(out, args.out)
    print(f"class counts {data.class_counts().tolist()} -> {out.class_counts().tolist()}")
    return EXIT_OK


def cmd_train(args):
    strategy = _strategy_from_flags(args)
    parse_strategy(strategy)
    cfg = config_from_args(args, [strategy or "multipath-ce"])
    if args.seeds is None:
        cfg = replace(cfg, seeds=cfg.seeds[:1])
    return _run(cfg, args)


def cmd_bench(args):
    strategies = args.strategies.split(",") if args.strategies else list(BENCH_STRATEGIES)
    cfg = config_from_args(args, strategies)
    if not args.config:
        # uniform alpha only rescales the softmax focal loss; the grid wants class balancing
        cfg = replace(cfg, seeds=cfg.seeds if args.seeds else list(range(10)),
                      focal_alpha=cfg.focal_alpha if args.focal_alpha is not None else "inverse")
    return _run(cfg, args)


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    if data.n_classes != model.n_classes:
        raise ConfigError(f"dataset has {data.n_classes} classes, model {model.n_classes}")
    pred = np.argmax(model.predict_probs(data.volumes), axis=-1)
    rep = class_report(confusion_matrix(pred, data.labels, data.n_classes))
    print(f"{'class':>5}  {'precision':>9}  {'recall':>6}  {'f1':>6}  {'g_mean':>6}")
    for c, p, r, f, g in rep.rows():
        print(f"{c:>5}  {p:9.3f}  {r:6.3f}  {f:6.3f}  {g:6.3f}")
    print(f"macro F1 {100 * rep.macro_f1:.1f}  macro G-mean {100 * rep.macro_g_mean:.1f}")
    if args.predictions:
        with open(args.predictions, "w") as fh:
            fh.write("index,true,pred\n")
            for i, (t, p) in enumerate(zip(data.labels, pred)):
                fh.write(f"{i},{t},{p}\n")
    return EXIT_OK


def cmd_report(args):
    problems = verify_report(args.run_dir, args.tol)
    rows, summary = rows_from_json(args.run_dir)
    _, table = emit_report(rows, summary=summary if len({r.seed for r in rows}) > 1 else None)
    print(table, end="")
    for p in problems:
        print(f"mismatch: {p}", file=sys.stderr)
    return EXIT_MISMATCH if problems else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "smote": cmd_smote,
    "train": cmd_train,
    "bench": cmd_bench,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults and args.command is None:
        print(ExperimentConfig().to_json())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, PopulationError, FloatingPointError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
