"""Experiment orchestration: datasets, two-stage runs, presets, reports.

Seed policy: a master seed expands through sha256-based derive_seed with
string labels, so every consumer gets an independent stream and any run is
reproducible from (config, master seed) alone:

    run seed       derive_seed(master, "run-<k>") for repeat k
    dataset        "raw-train", "raw-test", "bias", "test-bias"
    Stage I        "peer0", "peer1", "ecs-shuffle"
    Stage II       "train-<strategy>"

Outputs under <out_dir>/<experiment>/: per-strategy per-seed run dirs with
score tables, telemetry, epoch traces, reports and model checkpoints, plus
a byte-deterministic summary.csv, a verdict file for presets, and SVG
plots. Files are written to a temp name then renamed; an INCOMPLETE marker
sits in the experiment dir until the run finishes.
"""

from __future__ import annotations

import configparser
import dataclasses
import gzip
import hashlib
import io
import os
import tempfile
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn, plots, scoring, training
from .data import (RawDataset, _dataset_checksum, colorize, derive_seed,
                   glyph_raw, load_idx, make_unbiased_test, multi_colorize,
                   synth_blobs)
from .metrics import (MetricsReport, average_precision, group_accuracies,
                      precision_recall_at, report_csv_row, report_to_text,
                      split_accuracy, unbiased_accuracy)

DATA_DIR_ENV = "DEBIASLAB_DATA_DIR"

IDX_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IngestError(RuntimeError):
    pass


class UnknownPresetError(ValueError):
    def __init__(self, name):
        super().__init__(f"unknown preset {name!r}; available: "
                         f"{', '.join(sorted(PRESETS))}")


# -- configuration ------------------------------------------------------------------

@dataclass
class DatasetSpec:
    """What to train on. source: auto | idx | glyphs | blobs.

    "auto" uses real IDX digits when the data directory provides them and
    falls back to the procedural glyph corpus otherwise. rho has one entry
    per color attribute (two entries = left/right half coloring).
    """

    source: str = "auto"
    rho: tuple = (0.98,)
    train_size: int = 10000
    test_size: int = 2000
    jitter: float = 1.6
    n_classes: int = 10
    signal_dim: int = 16  # blobs only

    def validate(self):
        if self.source not in ("auto", "idx", "glyphs", "blobs"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if len(self.rho) not in (1, 2):
            raise ValueError("rho needs one or two entries")
        if self.train_size < 1 or self.test_size < 1:
            raise ValueError("split sizes must be positive")


# strategy tokens -> Stage-II wiring
STRATEGY_RECIPES = {
    "vanilla": dict(strategy="vanilla", partition="none", ssl="off"),
    "rew": dict(strategy="rew", partition="ground-truth", ssl="off"),
    "erew": dict(strategy="erew", partition="scores", ssl="off"),
    "ecs-ga": dict(strategy="ga", partition="scores", ssl="off"),
    "oracle-ga": dict(strategy="ga", partition="ground-truth", ssl="off"),
    "ecs-ga-ssl": dict(strategy="ga", partition="scores", ssl="rotation"),
}

SCORERS = ("ecs", "gce-ee", "gce", "vm")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    strategies: tuple = ("vanilla", "ecs-ga")
    scorers: tuple = ("ecs",)
    stage1_epochs: int = 30
    stage2_epochs: int = 50
    eta: float = 0.5
    tau: float = 0.8
    gamma: float = 1.6
    batch_size: int = 256
    learning_rate: float = 0.001
    hidden_sizes: tuple = (100, 100, 100)
    warmup_iterations: int | None = None
    ssl_weight: float = 1.0
    repeats: int = 3
    seed: int = 0
    out_dir: str = "runs"
    workers: int = 1

    def validate(self):
        self.dataset.validate()
        if self.repeats < 1:
            raise ValueError("repeat count must be >= 1")
        for s in self.strategies:
            if s not in STRATEGY_RECIPES:
                raise ValueError(f"unknown strategy token {s!r}")
        for s in self.scorers:
            if s not in SCORERS:
                raise ValueError(f"unknown scorer {s!r}")
        if self._needs_scores() and "ecs" not in self.scorers:
            raise ValueError("score-consuming strategies need the ecs scorer")

    def _needs_scores(self):
        return any(STRATEGY_RECIPES[s]["partition"] == "scores"
                   for s in self.strategies)

    def hash(self):
        return hashlib.sha256(repr(dataclasses.asdict(self)).encode()
                              ).hexdigest()[:16]


@dataclass
class RunRecord:
    """One strategy across all seeds of an experiment."""

    name: str
    config_hash: str
    seeds: list
    reports: list            # MetricsReport per seed
    mean: dict
    std: dict
    telemetry_paths: list
    traces: list             # per-seed epoch traces (list of dicts)
    wall_clock: float
    extras: dict = field(default_factory=dict)  # e.g. rotation head accuracy


def aggregate_reports(reports, extra_scalars=()):
    """Per-field mean and population std over per-seed reports.

    Only scalar fields participate; None anywhere drops the field.
    """
    names = ["unbiased_acc", "aligned_acc", "conflicting_acc", "ap",
             "precision_at_tau", "recall_at_tau"] + list(extra_scalars)
    mean, std = {}, {}
    for name in names:
        vals = [getattr(r, name, None) for r in reports]
        if any(v is None for v in vals):
            continue
        arr = np.array(vals, dtype=np.float64)
        mean[name] = float(arr.mean())
        std[name] = float(arr.std())
    return mean, std


# -- atomic files -------------------------------------------------------------------

def _atomic_write_text(path, text):
    path = str(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_save(path, save_fn):
    """Run save_fn(tmp_path) then rename into place."""
    path = str(path)
    tmp = path + ".part"
    save_fn(tmp)
    os.replace(tmp, path)


# -- datasets -----------------------------------------------------------------------

def resolve_data_dir():
    return os.environ.get(DATA_DIR_ENV) or None


def _idx_paths(data_dir):
    """Expected IDX file paths, accepting .gz variants."""
    out = []
    for name in IDX_NAMES:
        plain = os.path.join(data_dir, name)
        gz = plain + ".gz"
        out.append(plain if os.path.exists(plain) else gz)
    return out


def _read_idx_pair(images_path, labels_path):
    def slurp(p):
        if p.endswith(".gz"):
            with gzip.open(p, "rb") as fh:
                return fh.read()
        with open(p, "rb") as fh:
            return fh.read()

    # load_idx wants real files; hand it decompressed temp copies when gzipped
    if images_path.endswith(".gz") or labels_path.endswith(".gz"):
        with tempfile.TemporaryDirectory() as td:
            ip = os.path.join(td, "images")
            lp = os.path.join(td, "labels")
            with open(ip, "wb") as fh:
                fh.write(slurp(images_path))
            with open(lp, "wb") as fh:
                fh.write(slurp(labels_path))
            return load_idx(ip, lp)
    return load_idx(images_path, labels_path)


def load_idx_splits(data_dir):
    """(train RawDataset, test RawDataset) from a standard IDX directory."""
    paths = _idx_paths(data_dir)
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise IngestError(
            "missing IDX files: " + ", ".join(missing)
            + f" (searched {data_dir}; set {DATA_DIR_ENV} to the directory "
            "holding the four standard ubyte files, gzipped or plain)")
    train = _read_idx_pair(paths[0], paths[1])
    test = _read_idx_pair(paths[2], paths[3])
    return train, test


def ingest(source_dir, cache_dir):
    """Parse IDX splits and cache them as npz + manifest with a checksum.

    A valid cache short-circuits the parse; a corrupt one is re-parsed
    with a warning. Returns the two cache prefixes.
    """
    os.makedirs(cache_dir, exist_ok=True)
    prefixes = [os.path.join(cache_dir, "raw-train"),
                os.path.join(cache_dir, "raw-test")]
    cached = []
    for prefix in prefixes:
        raw = _load_raw_cache(prefix)
        cached.append(raw)
    if all(r is not None for r in cached):
        return prefixes
    train, test = load_idx_splits(source_dir)
    for prefix, raw in zip(prefixes, (train, test)):
        _save_raw_cache(prefix, raw)
    return prefixes


def _raw_checksum(raw):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(raw.images).tobytes())
    h.update(np.ascontiguousarray(raw.labels).tobytes())
    return h.hexdigest()


def _save_raw_cache(prefix, raw):
    np.savez(prefix + ".npz", images=raw.images, labels=raw.labels)
    cp = configparser.ConfigParser()
    cp["raw"] = {"n": str(raw.n), "n_classes": str(raw.n_classes),
                 "checksum": _raw_checksum(raw)}
    buf = io.StringIO()
    cp.write(buf)
    _atomic_write_text(prefix + ".manifest", buf.getvalue())


def _load_raw_cache(prefix):
    if not (os.path.exists(prefix + ".npz")
            and os.path.exists(prefix + ".manifest")):
        return None
    cp = configparser.ConfigParser()
    cp.read(prefix + ".manifest")
    with np.load(prefix + ".npz") as z:
        raw = RawDataset(z["images"], z["labels"],
                         int(cp["raw"]["n_classes"]))
    if _raw_checksum(raw) != cp["raw"]["checksum"]:
        warnings.warn(f"{prefix}: cache checksum mismatch, re-parsing source")
        return None
    return raw


def _subset_raw(raw, size, seed):
    if size >= raw.n:
        return raw
    idx = np.random.default_rng(seed).permutation(raw.n)[:size]
    return raw.subset(np.sort(idx))


def build_datasets(spec, seed):
    """(biased train split, unbiased test split) for one run seed."""
    spec.validate()
    source = spec.source
    data_dir = resolve_data_dir()
    if source == "auto":
        source = "idx" if data_dir else "glyphs"

    if source == "blobs":
        train = synth_blobs(spec.train_size, spec.signal_dim, spec.rho[0],
                            spec.n_classes, seed=derive_seed(seed, "bias"))
        test = synth_blobs(spec.test_size, spec.signal_dim,
                           1.0 / spec.n_classes, spec.n_classes,
                           seed=derive_seed(seed, "test-bias"), split="test")
        return train, test

    if source == "idx":
        raw_train, raw_test = load_idx_splits(data_dir or ".")
        raw_train = _subset_raw(raw_train, spec.train_size,
                                derive_seed(seed, "raw-train"))
        raw_test = _subset_raw(raw_test, spec.test_size,
                               derive_seed(seed, "raw-test"))
    else:
        raw_train = glyph_raw(spec.train_size,
                              seed=derive_seed(seed, "raw-train"),
                              jitter=spec.jitter)
        raw_test = glyph_raw(spec.test_size,
                             seed=derive_seed(seed, "raw-test"),
                             jitter=spec.jitter)

    if len(spec.rho) == 2:
        train = multi_colorize(raw_train, spec.rho[0], spec.rho[1],
                               seed=derive_seed(seed, "bias"))
        test = make_unbiased_test(raw_test, seed=derive_seed(seed, "test-bias"),
                                  attributes=2)
    else:
        train = colorize(raw_train, spec.rho[0], seed=derive_seed(seed, "bias"))
        test = make_unbiased_test(raw_test, seed=derive_seed(seed, "test-bias"))
    return train, test


# -- stage I ------------------------------------------------------------------------

def _scorer_fn(name):
    return {"ecs": scoring.ecs_train_and_score,
            "vm": scoring.vanilla_score,
            "gce": scoring.gce_score,
            "gce-ee": lambda ds, cfg: scoring.gce_score(ds, cfg, True)}[name]


def compute_scores(dataset, scorer, ecs_cfg, cache_dir=None):
    """Run one scorer, with an on-disk cache keyed by (data, config, scorer).

    The cache is what lets every Stage-II strategy (and overlapping presets)
    reuse a single Stage-I run.
    """
    key = None
    if cache_dir is not None:
        key = os.path.join(
            cache_dir,
            f"{_dataset_checksum(dataset)[:12]}-{ecs_cfg.hash()}-{scorer}.csv")
        if os.path.exists(key):
            try:
                return scoring.load_score_table(key), key
            except ValueError:
                warnings.warn(f"{key}: unreadable score cache, recomputing")
    table = _scorer_fn(scorer)(dataset, ecs_cfg)
    if key is not None:
        os.makedirs(cache_dir, exist_ok=True)
        _atomic_save(key, lambda tmp: scoring.save_score_table(tmp, table))
    return table, key


# -- stage II + evaluation ----------------------------------------------------------

def evaluate_model(model, test_set, tau=None, score_table=None, gt_flags=None):
    """MetricsReport for a trained model on the unbiased test split.

    Mining metrics (AP, precision/recall at tau) describe the training-split
    score table and are filled only when one is supplied.
    """
    preds = np.empty(test_set.n, dtype=np.int64)
    for lo in range(0, test_set.n, 4096):
        hi = min(lo + 4096, test_set.n)
        preds[lo:hi] = nn.forward(model, test_set.X[lo:hi]).argmax(axis=1)

    rep = MetricsReport(tau=tau)
    aligned, conflicting = split_accuracy(preds, test_set.y,
                                          test_set.fully_aligned())
    rep.aligned_acc, rep.conflicting_acc = aligned, conflicting
    if test_set.n_attributes > 1:
        overall, groups = group_accuracies(preds, test_set.y,
                                           test_set.group_ids())
        rep.unbiased_acc = overall
        rep.four_group_accs = groups
    else:
        rep.unbiased_acc, rep.group_accs = unbiased_accuracy(
            preds, test_set.y, test_set.bias[:, 0])
    if score_table is not None and gt_flags is not None:
        rep.ap, rep.pr_curve = average_precision(score_table.scores, gt_flags)
        rep.precision_at_tau, rep.recall_at_tau = precision_recall_at(
            score_table.scores, gt_flags, tau)
    return rep


def _trace_csv(trace):
    has_groups = trace and trace[0]["groups"] is not None
    group_ids = sorted(trace[0]["groups"]) if has_groups else []
    header = "epoch,unbiased,aligned,conflicting" + "".join(
        f",group{g}" for g in group_ids)
    lines = [header]
    for e in trace:
        row = [str(e["epoch"]), repr(float(e["unbiased"])),
               repr(float(e["aligned"])), repr(float(e["conflicting"]))]
        row += [repr(float(e["groups"][g])) for g in group_ids]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def read_trace_csv(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    names = lines[0].split(",")
    trace = []
    for line in lines[1:]:
        if not line:
            continue
        vals = line.split(",")
        entry = {"epoch": int(vals[0]), "unbiased": float(vals[1]),
                 "aligned": float(vals[2]), "conflicting": float(vals[3])}
        groups = {int(n[5:]): float(v) for n, v in zip(names[4:], vals[4:])}
        entry["groups"] = groups or None
        trace.append(entry)
    return trace


def _ssl_eval_set(spec, seed_k, size=1024):
    """Held-out images from the training distribution, for judging the
    rotation pretext.

    The unbiased test split deliberately shifts the color distribution, so
    measuring rotation accuracy there would grade color robustness instead
    of whether the head learned the pretext. Fresh same-distribution images
    keep the two questions separate.
    """
    if spec.source == "blobs":
        return None
    source = spec.source
    if source == "auto":
        source = "idx" if resolve_data_dir() else "glyphs"
    if source == "idx":
        _, raw = load_idx_splits(resolve_data_dir() or ".")
        raw = _subset_raw(raw, size, derive_seed(seed_k, "rot-eval"))
    else:
        raw = glyph_raw(size, seed=derive_seed(seed_k, "rot-eval"),
                        jitter=spec.jitter)
    if len(spec.rho) == 2:
        return multi_colorize(raw, spec.rho[0], spec.rho[1],
                              seed=derive_seed(seed_k, "rot-eval-bias"))
    return colorize(raw, spec.rho[0], seed=derive_seed(seed_k, "rot-eval-bias"))


def _run_one_strategy(cfg, token, seed_k, train_ds, test_ds, partition,
                      ecs_table, run_dir, ssl_eval=None):
    recipe = STRATEGY_RECIPES[token]
    tcfg = training.TrainConfig(
        strategy=recipe["strategy"],
        gamma=cfg.gamma, tau=cfg.tau, epochs=cfg.stage2_epochs,
        batch_size=cfg.batch_size,
        adam=nn.AdamConfig(lr=cfg.learning_rate),
        hidden_sizes=tuple(cfg.hidden_sizes),
        partition_source=("scores" if recipe["partition"] == "scores"
                          else "ground-truth"),
        ssl=recipe["ssl"], ssl_weight=cfg.ssl_weight,
        seed=derive_seed(seed_k, f"train-{token}"))

    fell_back = False
    if recipe["partition"] == "none":
        part = None
        scores = None
    elif recipe["partition"] == "ground-truth":
        part = train_ds.conflicting()
        scores = None
    else:
        part = partition.conflicting
        scores = ecs_table.scores
        if recipe["strategy"] == "ga" and partition.degenerate:
            # nothing (or everything) flagged: there is no minority to
            # emphasize, so the method degrades to plain training instead
            # of skipping every batch
            tcfg.strategy = "vanilla"
            part = None
            fell_back = True
    if tcfg.strategy != "erew":
        scores = None

    model, tel = training.train(train_ds, part, tcfg, eval_set=test_ds,
                                scores=scores)

    os.makedirs(run_dir, exist_ok=True)
    tel_path = os.path.join(run_dir, "telemetry.csv")
    _atomic_save(tel_path, lambda p: training.save_telemetry(p, tel))
    _atomic_write_text(os.path.join(run_dir, "trace.csv"),
                       _trace_csv(tel.epoch_trace))
    _atomic_save(os.path.join(run_dir, "model.ckpt"),
                 lambda p: nn.save_checkpoint(p, model))

    uses_scores = recipe["partition"] == "scores"
    rep = evaluate_model(
        model, test_ds, tau=cfg.tau,
        score_table=ecs_table if uses_scores else None,
        gt_flags=train_ds.conflicting() if uses_scores else None)
    _atomic_write_text(os.path.join(run_dir, "report.txt"),
                       report_to_text(rep) + "\n")

    extras = {"skipped": tel.skipped_count,
              "best": max(e["unbiased"] for e in tel.epoch_trace),
              "last": tel.epoch_trace[-1]["unbiased"],
              "vanilla_fallback": fell_back}
    if recipe["ssl"] == "rotation":
        ev = ssl_eval if ssl_eval is not None else test_ds
        extras["rotation_acc"] = training.rotation_accuracy(
            model, ev.X[:1024], ev.image_shape)
    return rep, tel, extras, tel_path


def _run_seed(cfg, k, out_root):
    seed_k = derive_seed(cfg.seed, f"run-{k}")
    train_ds, test_ds = build_datasets(cfg.dataset, seed_k)

    ecs_cfg = scoring.EcsConfig(
        confidence_threshold=cfg.eta, epochs=cfg.stage1_epochs,
        batch_size=cfg.batch_size,
        adam=nn.AdamConfig(lr=cfg.learning_rate),
        hidden_sizes=tuple(cfg.hidden_sizes),
        warmup_iterations=cfg.warmup_iterations,
        peer_seeds=(derive_seed(seed_k, "peer0"), derive_seed(seed_k, "peer1")),
        shuffle_seed=derive_seed(seed_k, "ecs-shuffle"))

    cache_dir = os.path.join(cfg.out_dir, "score-cache")
    scorer_stats = {}
    ecs_table = None
    for scorer in cfg.scorers:
        table, path = compute_scores(train_ds, scorer, ecs_cfg, cache_dir)
        ap, curve = average_precision(table.scores, train_ds.conflicting())
        prec, rec = precision_recall_at(table.scores, train_ds.conflicting(),
                                        cfg.tau)
        scorer_stats[scorer] = {"ap": ap, "precision": prec, "recall": rec,
                                "path": path, "pr_curve": curve}
        if scorer == "ecs":
            ecs_table = table

    partition = (scoring.threshold_scores(ecs_table, cfg.tau)
                 if ecs_table is not None else None)

    ssl_eval = None
    if any(STRATEGY_RECIPES[t]["ssl"] == "rotation" for t in cfg.strategies):
        ssl_eval = _ssl_eval_set(cfg.dataset, seed_k)

    strategy_results = {}
    for token in cfg.strategies:
        run_dir = os.path.join(out_root, token, f"seed{k}")
        rep, tel, extras, tel_path = _run_one_strategy(
            cfg, token, seed_k, train_ds, test_ds, partition, ecs_table,
            run_dir, ssl_eval=ssl_eval)
        strategy_results[token] = {
            "report": rep, "trace": tel.epoch_trace, "extras": extras,
            "telemetry_path": tel_path}
    return {"seed": seed_k, "scorers": scorer_stats,
            "strategies": strategy_results}


def _summary_csv(cfg, seed_results):
    header = ("experiment,strategy,seed,unbiased_acc,aligned_acc,"
              "conflicting_acc,best_unbiased,last_unbiased,"
              "skipped_iterations,ap,precision_at_tau,recall_at_tau")
    fmt = lambda v: "" if v is None else repr(float(v))
    lines = [header]
    for token in cfg.strategies:
        rows = []
        for k, res in enumerate(seed_results):
            r = res["strategies"][token]
            rep, ex = r["report"], r["extras"]
            rows.append([rep.unbiased_acc, rep.aligned_acc,
                         rep.conflicting_acc, ex["best"], ex["last"],
                         float(ex["skipped"]), rep.ap, rep.precision_at_tau,
                         rep.recall_at_tau])
            lines.append(f"{cfg.name},{token},{k}," +
                         ",".join(fmt(v) for v in rows[-1]))
        cols = list(zip(*rows))
        for stat, red in (("mean", np.mean), ("std", np.std)):
            cells = ["" if any(v is None for v in col)
                     else repr(float(red(np.array(col, dtype=np.float64))))
                     for col in cols]
            lines.append(f"{cfg.name},{token},{stat}," + ",".join(cells))
    for scorer in cfg.scorers:
        aps = []
        for k, res in enumerate(seed_results):
            st = res["scorers"][scorer]
            aps.append(st["ap"])
            lines.append(f"{cfg.name},score:{scorer},{k},,,,,,,"
                         f"{fmt(st['ap'])},{fmt(st['precision'])},"
                         f"{fmt(st['recall'])}")
        lines.append(f"{cfg.name},score:{scorer},mean,,,,,,,"
                     f"{fmt(np.mean(aps))},,")
    return "\n".join(lines) + "\n"


def emit_plots(out_root, cfg, seed_results):
    """Figure set for one experiment: accuracy curves, gradient traces,
    PR curves. Returns the written paths."""
    if not seed_results:
        warnings.warn("no runs to plot")
        return []
    written = []
    first = seed_results[0]
    traces = {t: first["strategies"][t]["trace"] for t in cfg.strategies}
    p = plots.accuracy_curves(traces, os.path.join(out_root, "accuracy.svg"),
                              title=f"{cfg.name}: unbiased accuracy")
    if p:
        written.append(p)
    for token in cfg.strategies:
        tel = training.load_telemetry(first["strategies"][token]["telemetry_path"])
        p = plots.gradient_traces(
            tel, cfg.gamma, os.path.join(out_root, f"gradients-{token}.svg"),
            title=f"{cfg.name}/{token}: gradient contributions")
        if p:
            written.append(p)
    curves = {scorer: st["pr_curve"]
              for scorer, st in first["scorers"].items() if st["pr_curve"]}
    if curves:
        p = plots.pr_curves(curves, os.path.join(out_root, "pr-curves.svg"),
                            title=f"{cfg.name}: score PR")
        if p:
            written.append(p)
    return written


def run_experiment(cfg, make_plots=True):
    """Execute every (strategy, seed) cell and persist all artifacts.

    Returns {strategy token: RunRecord} plus a "_seed_results" key with the
    raw per-seed structures (the verdict checks read those).
    """
    cfg.validate()
    out_root = os.path.join(cfg.out_dir, cfg.name)
    os.makedirs(out_root, exist_ok=True)
    marker = os.path.join(out_root, "INCOMPLETE")
    _atomic_write_text(marker, "run in progress or aborted\n")

    t0 = time.time()
    seed_results = [_run_seed(cfg, k, out_root) for k in range(cfg.repeats)]
    wall = time.time() - t0

    records = {}
    for token in cfg.strategies:
        reports = [r["strategies"][token]["report"] for r in seed_results]
        mean, std = aggregate_reports(reports)
        extras = {}
        for key in ("best", "last", "skipped", "rotation_acc",
                    "vanilla_fallback"):
            vals = [r["strategies"][token]["extras"].get(key)
                    for r in seed_results]
            if all(v is not None for v in vals):
                extras[key] = [float(v) for v in vals]
                mean[key] = float(np.mean(vals))
        records[token] = RunRecord(
            name=token, config_hash=cfg.hash(),
            seeds=[r["seed"] for r in seed_results],
            reports=reports, mean=mean, std=std,
            telemetry_paths=[r["strategies"][token]["telemetry_path"]
                             for r in seed_results],
            traces=[r["strategies"][token]["trace"] for r in seed_results],
            wall_clock=wall, extras=extras)

    _atomic_write_text(os.path.join(out_root, "summary.csv"),
                       _summary_csv(cfg, seed_results))
    if make_plots:
        emit_plots(out_root, cfg, seed_results)
    os.unlink(marker)
    records["_seed_results"] = seed_results
    return records


# -- presets and verdicts -----------------------------------------------------------

def _desk_dataset(**kw):
    base = dict(source="auto", rho=(0.98,), train_size=10000, test_size=2000,
                jitter=1.6)
    base.update(kw)
    return DatasetSpec(**base)


def build_presets():
    return {
        "cmnist-98-desk": ExperimentConfig(
            name="cmnist-98-desk", dataset=_desk_dataset(),
            strategies=("vanilla", "rew", "ecs-ga", "oracle-ga"),
            scorers=("ecs", "gce-ee", "gce", "vm"),
            stage1_epochs=30, stage2_epochs=50, repeats=3),
        "ssl-rotation-desk": ExperimentConfig(
            name="ssl-rotation-desk", dataset=_desk_dataset(),
            strategies=("ecs-ga", "ecs-ga-ssl"), scorers=("ecs",),
            stage1_epochs=30, stage2_epochs=50, repeats=3),
        "unbiased-safety": ExperimentConfig(
            name="unbiased-safety",
            dataset=_desk_dataset(rho=(0.1,), train_size=5000),
            strategies=("vanilla", "ecs-ga"), scorers=("ecs",),
            stage1_epochs=30, stage2_epochs=30, repeats=3),
        "few-conflicting": ExperimentConfig(
            name="few-conflicting", dataset=_desk_dataset(rho=(0.995,)),
            strategies=("vanilla", "rew", "oracle-ga"), scorers=(),
            stage1_epochs=30, stage2_epochs=40, repeats=3),
        "multicolor-desk": ExperimentConfig(
            name="multicolor-desk",
            dataset=_desk_dataset(rho=(0.99, 0.95), train_size=8000),
            strategies=("vanilla", "ecs-ga"), scorers=("ecs",),
            stage1_epochs=30, stage2_epochs=40, repeats=3),
    }


PRESETS = build_presets()


@dataclass
class Verdict:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _mean_unbiased(records, token):
    return records[token].mean["unbiased_acc"]


def _vanilla_trace_nonincreasing(records, tolerance=0.01):
    """No late gain: over the last third of training, vanilla's conflicting
    accuracy never exceeds its value at the third's start by > tolerance."""
    ok = True
    details = []
    for trace in records["vanilla"].traces:
        conf = [e["conflicting"] for e in trace]
        start = len(conf) - max(1, len(conf) // 3)
        rise = max(conf[start:]) - conf[start]
        details.append(f"{rise:+.4f}")
        ok = ok and rise <= tolerance
    return ok, "late conflicting-acc rise per seed: " + ", ".join(details)


def check_verdicts(name, records, seed_results):
    v = []
    if name == "cmnist-98-desk":
        ap = {s: [r["scorers"][s]["ap"] for r in seed_results]
              for s in ("ecs", "gce-ee", "gce", "vm")}
        ecs_mean = float(np.mean(ap["ecs"]))
        vm_mean = float(np.mean(ap["vm"]))
        v.append(Verdict("scoring-ap", ecs_mean >= 0.90,
                         f"mean AP(ecs) = {ecs_mean:.4f} (need >= 0.90)"))
        v.append(Verdict("scoring-ap-margin", ecs_mean - vm_mean >= 0.20,
                         f"AP(ecs) - AP(vm) = {ecs_mean - vm_mean:.4f} "
                         "(need >= 0.20)"))
        wins = sum(ap["ecs"][k] > ap["gce-ee"][k] > ap["gce"][k] > ap["vm"][k]
                   for k in range(len(ap["ecs"])))
        v.append(Verdict("scoring-ordering", wins >= 2,
                         f"ecs > gce-ee > gce > vm in {wins}/3 seeds "
                         "(need >= 2)"))
        precs = [r["scorers"]["ecs"]["precision"] for r in seed_results]
        recs = [r["scorers"]["ecs"]["recall"] for r in seed_results]
        pm = float(np.mean(precs))
        v.append(Verdict("mining-precision", pm >= 0.95,
                         f"mean precision@tau = {pm:.4f} (need >= 0.95); "
                         f"recall = {float(np.mean(recs)):.4f} (reported)"))
        gain = _mean_unbiased(records, "ecs-ga") - _mean_unbiased(records,
                                                                  "vanilla")
        v.append(Verdict("debias-gain", gain >= 0.08,
                         f"ecs-ga - vanilla = {gain * 100:.2f} points "
                         "(need >= 8)"))
        oracle_gap = (_mean_unbiased(records, "oracle-ga")
                      - _mean_unbiased(records, "ecs-ga"))
        v.append(Verdict("oracle-proximity", oracle_gap <= 0.03,
                         f"oracle-ga - ecs-ga = {oracle_gap * 100:.2f} points "
                         "(need <= 3)"))
        drop = (records["ecs-ga"].mean["best"]
                - records["ecs-ga"].mean["last"])
        v.append(Verdict("stability-last-vs-best", drop <= 0.02,
                         f"ecs-ga best - last = {drop * 100:.2f} points "
                         "(need <= 2)"))
        ok, detail = _vanilla_trace_nonincreasing(records)
        v.append(Verdict("vanilla-no-late-gain", ok, detail))
    elif name == "ssl-rotation-desk":
        delta = (_mean_unbiased(records, "ecs-ga-ssl")
                 - _mean_unbiased(records, "ecs-ga"))
        v.append(Verdict("ssl-non-degradation", delta >= -0.02,
                         f"ssl - base = {delta * 100:.2f} points (need >= -2)"))
        rot = records["ecs-ga-ssl"].mean["rotation_acc"]
        v.append(Verdict("rotation-head", rot >= 0.90,
                         f"held-out 4-way rotation accuracy = {rot:.4f} "
                         "(need >= 0.90)"))
    elif name == "unbiased-safety":
        gap = (_mean_unbiased(records, "vanilla")
               - _mean_unbiased(records, "ecs-ga"))
        v.append(Verdict("unbiased-safety", gap <= 0.025,
                         f"vanilla - ecs-ga = {gap * 100:.2f} points "
                         "(need <= 2.5)"))
    elif name == "few-conflicting":
        a = _mean_unbiased(records, "oracle-ga")
        b = _mean_unbiased(records, "rew")
        c = _mean_unbiased(records, "vanilla")
        v.append(Verdict("few-conflicting-ordering", a > b > c,
                         f"oracle-ga {a:.4f} > rew {b:.4f} > vanilla {c:.4f}"))
    elif name == "multicolor-desk":
        gain = (_mean_unbiased(records, "ecs-ga")
                - _mean_unbiased(records, "vanilla"))
        v.append(Verdict("multicolor-gain", gain > 0,
                         f"4-group mean: ecs-ga - vanilla = "
                         f"{gain * 100:.2f} points (need > 0)"))
    else:
        raise UnknownPresetError(name)
    return v


def reproduce(name, out_dir=None, repeats=None, make_plots=True):
    """Run a named preset and judge it against its acceptance thresholds.

    Returns (records, verdicts, summary_path).
    """
    if name not in PRESETS:
        raise UnknownPresetError(name)
    cfg = dataclasses.replace(PRESETS[name])
    if out_dir is not None:
        cfg.out_dir = out_dir
    if repeats is not None:
        cfg.repeats = repeats
    records = run_experiment(cfg, make_plots=make_plots)
    seed_results = records.pop("_seed_results")
    verdicts = check_verdicts(name, records, seed_results)
    out_root = os.path.join(cfg.out_dir, cfg.name)
    text = "\n".join(x.line() for x in verdicts)
    _atomic_write_text(
        os.path.join(out_root, "verdict.txt"),
        f"config_hash: {cfg.hash()}\nwall_clock_s: "
        f"{records[cfg.strategies[0]].wall_clock:.1f}\n{text}\n")
    return records, verdicts, os.path.join(out_root, "summary.csv")


# -- INI configs --------------------------------------------------------------------

def default_config():
    """Stock hyperparameters as a flat INI structure."""
    cp = configparser.ConfigParser()
    cp["dataset"] = {"source": "auto", "rho": "0.98", "train_size": "10000",
                     "test_size": "2000", "jitter": "1.6"}
    cp["scoring"] = {"eta": "0.5", "epochs": "30"}
    cp["training"] = {"tau": "0.8", "gamma": "1.6", "epochs": "50",
                      "batch_size": "256", "learning_rate": "0.001",
                      "hidden_sizes": "100,100,100", "ssl_weight": "1.0"}
    cp["harness"] = {"repeats": "3", "seed": "0", "out_dir": "runs",
                     "workers": "1"}
    return cp


def config_from_ini(cp, name="experiment", strategies=("vanilla", "ecs-ga")):
    ds = cp["dataset"]
    tr = cp["training"]
    hs = cp["harness"]
    rho = tuple(float(x) for x in ds.get("rho", "0.98").split(",") if x)
    return ExperimentConfig(
        name=name,
        dataset=DatasetSpec(
            source=ds.get("source", "auto"), rho=rho,
            train_size=ds.getint("train_size", 10000),
            test_size=ds.getint("test_size", 2000),
            jitter=ds.getfloat("jitter", 1.6),
            n_classes=ds.getint("n_classes", 10),
            signal_dim=ds.getint("signal_dim", 16)),
        strategies=tuple(strategies),
        stage1_epochs=cp["scoring"].getint("epochs", 30),
        stage2_epochs=tr.getint("epochs", 50),
        eta=cp["scoring"].getfloat("eta", 0.5),
        tau=tr.getfloat("tau", 0.8),
        gamma=tr.getfloat("gamma", 1.6),
        batch_size=tr.getint("batch_size", 256),
        learning_rate=tr.getfloat("learning_rate", 0.001),
        hidden_sizes=tuple(int(x) for x in
                           tr.get("hidden_sizes", "100,100,100").split(",")),
        ssl_weight=tr.getfloat("ssl_weight", 1.0),
        repeats=hs.getint("repeats", 3),
        seed=hs.getint("seed", 0),
        out_dir=hs.get("out_dir", "runs"),
        workers=hs.getint("workers", 1))


def apply_overrides(cp, pairs):
    """pairs like ["training.gamma=2.0"]; creates sections as needed."""
    for pair in pairs:
        key, _, value = pair.partition("=")
        section, _, option = key.partition(".")
        if not option or not value:
            raise ValueError(f"override must look like section.key=value, "
                             f"got {pair!r}")
        if section not in cp:
            cp[section] = {}
        cp[section][option] = value
    return cp
