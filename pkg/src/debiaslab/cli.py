"""Command line front end.

Subcommands: ingest, score, train, evaluate, reproduce, plot. Hyperparameters
come from an INI config (see harness.default_config) and any key can be
overridden with --set section.key=value. The data directory for real IDX
digit files is taken from the DEBIASLAB_DATA_DIR environment variable.
"""

import argparse
import os
import sys

from . import harness, nn, plots, scoring, training
from .data import DatasetCacheError, IdxError, derive_seed, load_dataset, \
    save_dataset
from .metrics import average_precision, precision_recall_at, report_to_text


def _add_config_args(p):
    p.add_argument("--config", help="INI config file (defaults built in)")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override a config key, repeatable")


def _load_config(args):
    cp = harness.default_config()
    if args.config:
        if not cp.read(args.config):
            raise FileNotFoundError(args.config)
    harness.apply_overrides(cp, getattr(args, "set", []))
    return cp


def _dataset_spec(cp):
    ds = cp["dataset"]
    return harness.DatasetSpec(
        source=ds.get("source", "auto"),
        rho=tuple(float(x) for x in ds.get("rho", "0.98").split(",") if x),
        train_size=ds.getint("train_size", 10000),
        test_size=ds.getint("test_size", 2000),
        jitter=ds.getfloat("jitter", 1.6),
        n_classes=ds.getint("n_classes", 10),
        signal_dim=ds.getint("signal_dim", 16))


def _ecs_config(cp, seed):
    sc = cp["scoring"]
    tr = cp["training"]
    return scoring.EcsConfig(
        confidence_threshold=sc.getfloat("eta", 0.5),
        epochs=sc.getint("epochs", 30),
        batch_size=tr.getint("batch_size", 256),
        adam=nn.AdamConfig(lr=tr.getfloat("learning_rate", 0.001)),
        hidden_sizes=tuple(int(x) for x in
                           tr.get("hidden_sizes", "100,100,100").split(",")),
        peer_seeds=(derive_seed(seed, "peer0"), derive_seed(seed, "peer1")),
        shuffle_seed=derive_seed(seed, "ecs-shuffle"))


def cmd_ingest(args):
    cp = _load_config(args)
    spec = _dataset_spec(cp)
    if args.source:
        spec.source = args.source
    seed = cp["harness"].getint("seed", 0)
    run_seed = derive_seed(seed, "run-0")
    if spec.source == "idx" and args.cache:
        harness.ingest(harness.resolve_data_dir() or ".", args.cache)
    train, test = harness.build_datasets(spec, run_seed)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(os.path.join(args.out, "train"), train, seed=run_seed)
    save_dataset(os.path.join(args.out, "test"), test, seed=run_seed)
    print(f"wrote {args.out}/train.npz and {args.out}/test.npz "
          f"(n={train.n}/{test.n}, rho={spec.rho})")
    return 0


def cmd_score(args):
    cp = _load_config(args)
    ds = load_dataset(args.train_data)
    seed = cp["harness"].getint("seed", 0)
    cfg = _ecs_config(cp, derive_seed(seed, "run-0"))
    table, _ = harness.compute_scores(ds, args.scorer, cfg, cache_dir=None)
    harness._atomic_save(args.out,
                         lambda p: scoring.save_score_table(p, table))
    ap, _ = average_precision(table.scores, ds.conflicting())
    tau = cp["training"].getfloat("tau", 0.8)
    prec, rec = precision_recall_at(table.scores, ds.conflicting(), tau)
    prec_txt = "n/a" if prec is None else f"{prec:.4f}"
    print(f"wrote {args.out}; AP={ap:.4f} precision@{tau}={prec_txt} "
          f"recall={rec:.4f}")
    return 0


def cmd_train(args):
    cp = _load_config(args)
    ds = load_dataset(args.train_data)
    test = load_dataset(args.test_data) if args.test_data else None
    seed = cp["harness"].getint("seed", 0)
    recipe = harness.STRATEGY_RECIPES[args.strategy]
    tr = cp["training"]
    tcfg = training.TrainConfig(
        strategy=recipe["strategy"],
        gamma=tr.getfloat("gamma", 1.6), tau=tr.getfloat("tau", 0.8),
        epochs=tr.getint("epochs", 50),
        batch_size=tr.getint("batch_size", 256),
        adam=nn.AdamConfig(lr=tr.getfloat("learning_rate", 0.001)),
        hidden_sizes=tuple(int(x) for x in
                           tr.get("hidden_sizes", "100,100,100").split(",")),
        partition_source=("scores" if recipe["partition"] == "scores"
                          else "ground-truth"),
        ssl=recipe["ssl"], ssl_weight=tr.getfloat("ssl_weight", 1.0),
        seed=derive_seed(derive_seed(seed, "run-0"), f"train-{args.strategy}"))

    part, scores = None, None
    if recipe["partition"] == "ground-truth":
        part = ds.conflicting()
    elif recipe["partition"] == "scores":
        if not args.scores:
            raise SystemExit(f"strategy {args.strategy} needs --scores")
        table = scoring.load_score_table(args.scores)
        part = scoring.threshold_scores(table, tcfg.tau).conflicting
        if recipe["strategy"] == "erew":
            scores = table.scores

    model, tel = training.train(ds, part, tcfg, eval_set=test, scores=scores)
    os.makedirs(args.out, exist_ok=True)
    harness._atomic_save(os.path.join(args.out, "model.ckpt"),
                         lambda p: nn.save_checkpoint(p, model))
    harness._atomic_save(os.path.join(args.out, "telemetry.csv"),
                         lambda p: training.save_telemetry(p, tel))
    if tel.epoch_trace:
        harness._atomic_write_text(os.path.join(args.out, "trace.csv"),
                                   harness._trace_csv(tel.epoch_trace))
        last = tel.epoch_trace[-1]
        print(f"final unbiased accuracy {last['unbiased']:.4f} "
              f"(aligned {last['aligned']:.4f}, "
              f"conflicting {last['conflicting']:.4f})")
    print(f"wrote model + telemetry under {args.out} "
          f"(skipped {tel.skipped_count} iterations)")
    return 0


def cmd_evaluate(args):
    cp = _load_config(args)
    test = load_dataset(args.test_data)
    model, _ = nn.load_checkpoint(args.model)
    table = scoring.load_score_table(args.scores) if args.scores else None
    gt = load_dataset(args.train_data).conflicting() if args.train_data else None
    rep = harness.evaluate_model(
        model, test, tau=cp["training"].getfloat("tau", 0.8),
        score_table=table if gt is not None else None, gt_flags=gt)
    text = report_to_text(rep)
    if args.out:
        harness._atomic_write_text(args.out, text + "\n")
        print(f"wrote {args.out}")
    print(text)
    return 0


def cmd_reproduce(args):
    try:
        records, verdicts, summary = harness.reproduce(
            args.preset, out_dir=args.out_dir, repeats=args.repeats,
            make_plots=not args.no_plots)
    except harness.UnknownPresetError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    for v in verdicts:
        print(v.line())
    print(f"summary: {summary}")
    return 0 if all(v.passed for v in verdicts) else 1


def cmd_plot(args):
    os.makedirs(args.out, exist_ok=True)
    written = []
    tel_path = os.path.join(args.run_dir, "telemetry.csv")
    trace_path = os.path.join(args.run_dir, "trace.csv")
    if not os.path.exists(tel_path):
        raise SystemExit(f"missing telemetry: {tel_path}")
    tel = training.load_telemetry(tel_path)
    p = plots.gradient_traces(tel, args.gamma,
                              os.path.join(args.out, "gradients.svg"))
    if p:
        written.append(p)
    if os.path.exists(trace_path):
        trace = harness.read_trace_csv(trace_path)
        p = plots.accuracy_curves({"run": trace},
                                  os.path.join(args.out, "accuracy.svg"))
        if p:
            written.append(p)
    if args.scores and args.train_data:
        table = scoring.load_score_table(args.scores)
        gt = load_dataset(args.train_data).conflicting()
        _, curve = average_precision(table.scores, gt)
        p = plots.pr_curves({"scores": curve},
                            os.path.join(args.out, "pr.svg"))
        if p:
            written.append(p)
    for p in written:
        print(f"wrote {p}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(
        prog="debiaslab",
        description="Two-stage debiasing lab: score bias-conflicting samples, "
                    "then retrain with gradient-aligned emphasis.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build and cache a biased dataset pair")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--source", choices=["auto", "idx", "glyphs", "blobs"])
    p.add_argument("--cache", help="also cache parsed raw IDX splits here")
    _add_config_args(p)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("score", help="Stage I: bias-conflicting scores")
    p.add_argument("--train-data", required=True, help="dataset prefix")
    p.add_argument("--out", required=True, help="score table path")
    p.add_argument("--scorer", default="ecs", choices=list(harness.SCORERS))
    _add_config_args(p)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("train", help="Stage II: train one strategy")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", help="unbiased split for per-epoch traces")
    p.add_argument("--scores", help="score table from the score step")
    p.add_argument("--strategy", default="ecs-ga",
                   choices=list(harness.STRATEGY_RECIPES))
    p.add_argument("--out", required=True, help="run directory")
    _add_config_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="metrics report for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--scores", help="score table for mining metrics")
    p.add_argument("--train-data", help="training set (ground truth flags)")
    p.add_argument("--out", help="write the report here too")
    _add_config_args(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("reproduce", help="run a desk-scale preset + verdicts")
    p.add_argument("preset", help=", ".join(sorted(harness.PRESETS)))
    p.add_argument("--out-dir", default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(fn=cmd_reproduce)

    p = sub.add_parser("plot", help="render SVGs from a finished run dir")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float, default=1.6)
    p.add_argument("--scores")
    p.add_argument("--train-data")
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FileNotFoundError, DatasetCacheError, IdxError,
            harness.IngestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
