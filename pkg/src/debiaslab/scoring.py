"""Stage I: estimate a bias-conflicting score for every training sample.

Two deliberately biased peer models are trained with selective updates
(confident-picking and peer-picking), and each sample's score accrues
1 - mean peer confidence at regular checkpoints. Samples the shortcut rule
keeps failing on end up with scores near 1.
"""

from __future__ import annotations

import dataclasses
import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn

# cluster tags: a batch is split by which peers are confident on a sample
BOTH_CONFIDENT = 0      # descend on both peers
NEITHER_CONFIDENT = 1   # discarded this iteration
ONLY_FIRST_CONFIDENT = 2   # first peer ascends (forced to forget)
ONLY_SECOND_CONFIDENT = 3  # second peer ascends

_CLUSTER_NAMES = {0: "both", 1: "neither", 2: "only-first", 3: "only-second"}


class DivergenceError(RuntimeError):
    """A peer's parameters went non-finite during scoring."""

    def __init__(self, peer, iteration):
        self.peer = peer
        self.iteration = iteration
        super().__init__(f"peer {peer} diverged (non-finite parameters) "
                         f"at iteration {iteration}")


@dataclass
class EcsConfig:
    """Stage-I settings.

    total_iterations (T) defaults to epochs full passes; checkpoint_interval
    (T') defaults to floor(N/B), i.e. score once per epoch. picking selects
    the update rule: "peer" needs two peers, "confident" keeps only samples
    the model itself is sure about, "none" is plain training.
    """

    confidence_threshold: float = 0.5
    epochs: int = 30
    total_iterations: int | None = None
    checkpoint_interval: int | None = None
    # plain-descent iterations before selective updates engage; a freshly
    # initialized C-class model is confident on nothing (p ~ 1/C), so with
    # picking active from step 0 every sample would be discarded forever
    warmup_iterations: int | None = None  # default: one epoch
    batch_size: int = 256
    adam: nn.AdamConfig = field(default_factory=nn.AdamConfig)
    hidden_sizes: tuple = (100, 100, 100)
    peer_seeds: tuple = (11, 12)
    shuffle_seed: int = 0
    n_peers: int = 2
    picking: str = "peer"
    loss: str = "ce"
    gce_q: float = 0.7
    epoch_ensemble: bool = True

    def resolve(self, n_samples):
        """Validate and return (T, T_checkpoint, warmup iterations)."""
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence threshold must lie strictly in (0, 1)")
        if self.batch_size < 1 or self.batch_size > n_samples:
            raise ValueError("batch size must lie in [1, N]")
        per_epoch = n_samples // self.batch_size
        total = self.total_iterations or self.epochs * per_epoch
        interval = self.checkpoint_interval or per_epoch
        warmup = per_epoch if self.warmup_iterations is None else self.warmup_iterations
        if not 1 <= interval <= total:
            raise ValueError("checkpoint interval must lie in [1, T]")
        if not 0 <= warmup < total:
            raise ValueError("warmup must lie in [0, T)")
        if self.n_peers not in (1, 2):
            raise ValueError("n_peers must be 1 or 2")
        if self.picking not in ("peer", "confident", "none"):
            raise ValueError(f"unknown picking mode {self.picking!r}")
        if self.picking == "peer" and self.n_peers != 2:
            raise ValueError("peer-picking needs two peers")
        if self.loss not in ("ce", "gce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "gce" and self.picking != "none":
            raise ValueError("the robust-loss scorer does not use picking")
        if self.n_peers == 2 and self.peer_seeds[0] == self.peer_seeds[1]:
            warnings.warn("peer seeds are equal: peers will stay identical "
                          "and peer-picking will never fire", stacklevel=3)
        return total, interval, warmup

    def hash(self):
        """Stable hex digest of every field (for score-table headers)."""
        blob = repr(dataclasses.asdict(self))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ClusterAssignment:
    """Per-sample cluster tags for one batch."""

    tags: np.ndarray  # values in {0..3}

    def mask(self, tag):
        return self.tags == tag

    def counts(self):
        return {name: int((self.tags == tag).sum())
                for tag, name in _CLUSTER_NAMES.items()}


@dataclass
class BCScoreTable:
    """Finalized per-sample bias-conflicting scores in [0, 1]."""

    scores: np.ndarray          # (N,)
    accrued_weight: np.ndarray  # (N,) total checkpoint weight per sample
    checkpoint_count: int
    cfg_hash: str = ""


@dataclass
class PseudoPartition:
    """Thresholded scores: the training partition Stage II consumes."""

    conflicting: np.ndarray  # (N,) bool
    tau: float
    n_conflicting: int
    n_aligned: int
    degenerate: bool  # all samples landed on one side


class ScoreAccumulator:
    """Running weighted mean of (1 - mean peer probability) per sample."""

    def __init__(self, n):
        self.raw = np.zeros(n)
        self.weight = np.zeros(n)
        self.count = 0

    def add_checkpoint(self, mean_probs, weight):
        mean_probs = np.asarray(mean_probs, dtype=np.float64)
        if mean_probs.shape != self.raw.shape:
            raise ValueError("probability vector has wrong length")
        if np.any(mean_probs < 0) or np.any(mean_probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        self.raw += weight * (1.0 - mean_probs)
        self.weight += weight
        self.count += 1

    def finalize(self, cfg_hash=""):
        if self.count == 0:
            raise ValueError("no checkpoints accumulated")
        return BCScoreTable(self.raw / self.weight, self.weight.copy(),
                            self.count, cfg_hash)


def classify_clusters(p1, p2, threshold):
    """Split a batch by which peers predict the label confidently.

    strictly-above threshold counts as confident; ties go to unconfident.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    for p in (p1, p2):
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("probabilities must lie in [0, 1]")
    c1 = p1 > threshold
    c2 = p2 > threshold
    tags = np.full(p1.shape, NEITHER_CONFIDENT, dtype=np.int64)
    tags[c1 & c2] = BOTH_CONFIDENT
    tags[c1 & ~c2] = ONLY_FIRST_CONFIDENT
    tags[~c1 & c2] = ONLY_SECOND_CONFIDENT
    return ClusterAssignment(tags)


def _label_probs(model, X, y, chunk=4096):
    """p(y|model(x)) over a full dataset, evaluated in chunks."""
    out = np.empty(X.shape[0])
    for lo in range(0, X.shape[0], chunk):
        hi = min(lo + chunk, X.shape[0])
        out[lo:hi] = nn.prob_of_label(nn.forward(model, X[lo:hi]), y[lo:hi])
    return out


def _batch_stream(n, batch_size, total, rng):
    """Shuffled full batches, reshuffling each pass; remainder dropped."""
    batches = []
    while len(batches) < total:
        perm = rng.permutation(n)
        for k in range(n // batch_size):
            batches.append(perm[k * batch_size:(k + 1) * batch_size])
            if len(batches) == total:
                break
    return batches


def _train_and_score(dataset, cfg):
    """Shared scoring engine behind ecs/vanilla/gce entry points."""
    total, interval, warmup = cfg.resolve(dataset.n)
    B = cfg.batch_size
    dim = dataset.X.shape[1]
    models = [nn.init_mlp(dim, list(cfg.hidden_sizes), dataset.n_classes, seed=s)
              for s in cfg.peer_seeds[:cfg.n_peers]]
    states = [nn.init_adam(m, dataclasses.replace(cfg.adam)) for m in models]
    rng = np.random.default_rng(cfg.shuffle_seed)
    acc = ScoreAccumulator(dataset.n)

    def checkpoint(weight):
        probs = np.mean([_label_probs(m, dataset.X, dataset.y) for m in models],
                        axis=0)
        acc.add_checkpoint(probs, weight)

    for t, idx in enumerate(_batch_stream(dataset.n, B, total, rng), start=1):
        Xb, yb = dataset.X[idx], dataset.y[idx]
        probs = [nn.prob_of_label(nn.forward(m, Xb), yb) for m in models]

        if t <= warmup:
            descend = [np.ones(B, dtype=bool)] * cfg.n_peers
            ascend = [np.zeros(B, dtype=bool)] * cfg.n_peers
        elif cfg.picking == "peer":
            clusters = classify_clusters(probs[0], probs[1],
                                         cfg.confidence_threshold)
            descend = [clusters.mask(BOTH_CONFIDENT)] * 2
            ascend = [clusters.mask(ONLY_FIRST_CONFIDENT),
                      clusters.mask(ONLY_SECOND_CONFIDENT)]
        elif cfg.picking == "confident":
            descend = [p > cfg.confidence_threshold for p in probs]
            ascend = [np.zeros(B, dtype=bool)] * cfg.n_peers
        else:
            descend = [np.ones(B, dtype=bool)] * cfg.n_peers
            ascend = [np.zeros(B, dtype=bool)] * cfg.n_peers

        for k, (model, state) in enumerate(zip(models, states)):
            if cfg.loss == "gce":
                weights = descend[k] * probs[k] ** cfg.gce_q
            else:
                weights = descend[k].astype(np.float64)
            grad = nn.weighted_cross_entropy_backward(model, Xb, yb, weights)
            if ascend[k].any():
                grad.add_scaled(nn.weighted_cross_entropy_backward(
                    model, Xb, yb, ascend[k].astype(np.float64), sign=-1))
            nn.adam_step(model, grad, state)
            if not model.all_finite():
                raise DivergenceError(k, t)

        if cfg.epoch_ensemble and t % interval == 0:
            checkpoint(interval / total)

    if cfg.epoch_ensemble:
        if total % interval != 0:
            checkpoint((total % interval) / total)
    else:
        checkpoint(1.0)
    return acc.finalize(cfg.hash())


def ecs_train_and_score(dataset, cfg=None):
    """Full scorer: two peers, selective updates, checkpoint ensembling."""
    return _train_and_score(dataset, cfg or EcsConfig())


def vanilla_score(dataset, cfg=None):
    """Baseline: one plainly trained model, scored from its final state."""
    cfg = dataclasses.replace(cfg or EcsConfig(), n_peers=1, picking="none",
                              loss="ce", epoch_ensemble=False)
    return _train_and_score(dataset, cfg)


def gce_score(dataset, cfg=None, use_epoch_ensemble=False):
    """Baseline: one model under the robust loss, optionally ensembled."""
    cfg = dataclasses.replace(cfg or EcsConfig(), n_peers=1, picking="none",
                              loss="gce", epoch_ensemble=use_epoch_ensemble)
    return _train_and_score(dataset, cfg)


def threshold_scores(table, tau):
    """Pseudo conflicting/aligned partition: conflicting iff score >= tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie strictly in (0, 1)")
    conflicting = table.scores >= tau
    n_conf = int(conflicting.sum())
    return PseudoPartition(conflicting, tau, n_conf,
                           int(conflicting.size - n_conf),
                           degenerate=n_conf in (0, conflicting.size))


# -- score table files -----------------------------------------------------------

def save_score_table(path, table):
    """Text table: header comments (cfg hash, checkpoints), then index,score
    rows. repr() formatting keeps the round trip byte-exact."""
    lines = ["# bias-conflicting scores v1",
             f"# cfg_hash: {table.cfg_hash}",
             f"# checkpoints: {table.checkpoint_count}",
             "index,score,accrued_weight"]
    for i, (s, w) in enumerate(zip(table.scores, table.accrued_weight)):
        lines.append(f"{i},{float(s)!r},{float(w)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_score_table(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "# bias-conflicting scores v1":
        raise ValueError(f"{path}: not a score table")
    cfg_hash = lines[1].split(": ", 1)[1]
    count = int(lines[2].split(": ", 1)[1])
    rows = [line.split(",") for line in lines[4:] if line]
    idx = np.array([int(r[0]) for r in rows])
    if not np.array_equal(idx, np.arange(len(rows))):
        raise ValueError(f"{path}: sample indices must be 0..N-1 in order")
    scores = np.array([float(r[1]) for r in rows])
    weights = np.array([float(r[2]) for r in rows])
    return BCScoreTable(scores, weights, count, cfg_hash)
