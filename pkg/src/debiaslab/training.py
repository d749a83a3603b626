"""Stage II: retrain with the loss rebalanced around the pseudo partition.

Strategies: plain training, static reweighting (by partition counts or by
scores), and per-iteration gradient alignment, which rescales the aligned
group's weight each batch so both groups contribute equal gradient mass.
Optional rotation-prediction auxiliary loss shares the trunk.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import derive_seed
from .metrics import group_accuracies, split_accuracy, unbiased_accuracy

STRATEGIES = ("vanilla", "rew", "erew", "ga")


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration):
        self.iteration = iteration
        super().__init__(f"non-finite parameters at iteration {iteration}")


class AllAlignedPartitionError(ValueError):
    """No conflicting samples: static reweighting is undefined."""

    def __init__(self):
        super().__init__("partition has no conflicting side; fall back to "
                         "the vanilla strategy instead of reweighting")


@dataclass
class TrainConfig:
    strategy: str = "vanilla"
    gamma: float = 1.6
    tau: float = 0.8
    epochs: int = 50
    batch_size: int = 256
    adam: nn.AdamConfig = field(default_factory=nn.AdamConfig)
    hidden_sizes: tuple = (100, 100, 100)
    partition_source: str = "scores"  # "scores" | "ground-truth"
    ssl: str = "off"                  # "off" | "rotation"
    ssl_weight: float = 1.0
    seed: int = 0
    # testing seam: freeze the alignment ratio instead of recomputing it
    # (1.0 reproduces vanilla exactly; static reweighting is a frozen ratio)
    force_ratio: float | None = None

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.ssl not in ("off", "rotation"):
            raise ValueError(f"unknown ssl mode {self.ssl!r}")
        if self.partition_source not in ("scores", "ground-truth"):
            raise ValueError(f"unknown partition source {self.partition_source!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")


@dataclass
class TrainTelemetry:
    """Per-iteration gradient-contribution traces plus per-epoch accuracy.

    The g_* columns sum 2 - 2p over the partition the trainer actually used;
    the gt_* columns use ground-truth flags (for diagnostics plots). ratio
    is NaN on skipped or non-alignment iterations.
    """

    iterations: np.ndarray
    g_aligned: np.ndarray
    g_conflicting: np.ndarray
    ratio: np.ndarray
    skipped: np.ndarray  # bool
    gt_g_aligned: np.ndarray
    gt_g_conflicting: np.ndarray
    epoch_trace: list  # dicts: epoch, unbiased, aligned, conflicting, groups
    skipped_count: int = 0


def grad_contribution(p_of_label):
    """Gradient mass a sample feeds the logits under CE: 2 - 2 p(y|f(x))."""
    p = np.asarray(p_of_label, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    out = 2.0 - 2.0 * p
    return float(out) if out.ndim == 0 else out


def rew_weight(n_conflicting, n_aligned, gamma):
    """Static per-sample weight for aligned samples: N_conf / (gamma N_align)."""
    if n_aligned == 0:
        raise ValueError("no aligned samples; reweighting degenerates, train "
                         "with the vanilla strategy instead")
    if n_conflicting == 0:
        raise AllAlignedPartitionError()
    return n_conflicting / (gamma * n_aligned)


def ga_ratio(probs, conflicting_mask, gamma):
    """Alignment ratio r = sum_conf (1-p) / (gamma sum_align (1-p)).

    Detached: the caller treats it as a constant weight. Returns None when
    either side is empty or the aligned side has zero contribution (the
    iteration should then be skipped).
    """
    probs = np.asarray(probs, dtype=np.float64)
    conflicting_mask = np.asarray(conflicting_mask, dtype=bool)
    aligned = ~conflicting_mask
    if not aligned.any() or not conflicting_mask.any():
        return None
    denom = gamma * np.sum(1.0 - probs[aligned])
    if denom == 0.0:
        return None
    return float(np.sum(1.0 - probs[conflicting_mask]) / denom)


def build_iteration_loss(strategy, conflicting_mask, *, ratio=None,
                         aligned_weight=None, scores=None):
    """Per-sample CE weights for one batch under the chosen strategy."""
    conflicting_mask = np.asarray(conflicting_mask, dtype=bool)
    n = conflicting_mask.shape[0]
    if strategy == "vanilla":
        return np.ones(n)
    if strategy == "rew":
        return np.where(conflicting_mask, 1.0, aligned_weight)
    if strategy == "erew":
        scores = np.asarray(scores, dtype=np.float64)
        total = scores.sum()
        if total == 0.0:
            return np.ones(n)
        return scores * (n / total)
    if strategy == "ga":
        return np.where(conflicting_mask, 1.0, ratio)
    raise ValueError(f"unknown strategy {strategy!r}")


def rotate(images, k):
    """Exact 90-degree-step rotation of (..., H, W) arrays.

    k = 1 sends pixel (r, c) to (c, H-1-r); square canvases only.
    """
    images = np.asarray(images)
    h, w = images.shape[-2:]
    if h != w:
        raise ValueError(f"rotation needs square images, got {h}x{w}")
    return np.rot90(images, k=-int(k) % 4, axes=(-2, -1))


def _rotated_flat(X, image_shape, k):
    """Rotate a flat batch (B, C*H*W) and flatten back."""
    b = X.shape[0]
    planes = X.reshape(b, *image_shape)
    return np.ascontiguousarray(rotate(planes, k)).reshape(b, -1)


def rotation_loss(model, X, image_shape):
    """Mean 4-way rotation-prediction CE over all four rotations of a batch.

    Returns (loss, BatchGrad); gradients touch the trunk and the auxiliary
    head only, the task head's entries stay zero.
    """
    if model.aux_head is None:
        raise ValueError("model has no auxiliary rotation head")
    b = X.shape[0]
    total = nn.zero_grads(model)
    for k in range(4):
        g = nn.weighted_cross_entropy_backward(
            model, _rotated_flat(X, image_shape, k),
            np.full(b, k), np.ones(b), head="aux")
        total.add_scaled(g, 0.25)
    return total.mean_loss, total


def rotation_accuracy(model, X, image_shape):
    """4-way accuracy of the auxiliary head over all rotations of a batch."""
    hits = 0
    for k in range(4):
        logits = nn.forward_aux(model, _rotated_flat(X, image_shape, k))
        hits += int((logits.argmax(axis=1) == k).sum())
    return hits / (4 * X.shape[0])


def _epoch_eval(model, eval_set):
    preds = np.empty(eval_set.n, dtype=np.int64)
    for lo in range(0, eval_set.n, 4096):
        hi = min(lo + 4096, eval_set.n)
        preds[lo:hi] = nn.forward(model, eval_set.X[lo:hi]).argmax(axis=1)
    aligned, conflicting = split_accuracy(preds, eval_set.y,
                                          eval_set.fully_aligned())
    groups = None
    if eval_set.n_attributes > 1:
        unbiased, groups = group_accuracies(preds, eval_set.y,
                                            eval_set.group_ids())
    else:
        unbiased, _ = unbiased_accuracy(preds, eval_set.y, eval_set.bias[:, 0])
    return {"unbiased": unbiased, "aligned": aligned,
            "conflicting": conflicting, "groups": groups}


def train(dataset, partition, cfg, eval_set=None, scores=None):
    """Stage-II training loop. Returns (model, TrainTelemetry).

    partition is the per-sample conflicting mask the strategy consumes
    (pseudo from thresholded scores, or ground truth for oracle runs);
    vanilla ignores it for weighting but it still drives telemetry.
    scores are required by the score-weighted strategy only.
    """
    cfg.validate()
    if cfg.strategy == "erew" and scores is None:
        raise ValueError("score-weighted strategy needs per-sample scores")
    if partition is None:
        if cfg.strategy in ("rew", "ga"):
            raise ValueError(f"strategy {cfg.strategy!r} needs a partition")
        partition = dataset.conflicting()
    partition = np.asarray(partition, dtype=bool)
    if partition.shape[0] != dataset.n:
        raise ValueError("partition must cover the whole train split")
    if cfg.ssl == "rotation" and dataset.image_shape is None:
        raise ValueError("rotation pretext needs spatial image data")

    aligned_weight = None
    if cfg.strategy == "rew":
        aligned_weight = rew_weight(int(partition.sum()),
                                    int((~partition).sum()), cfg.gamma)

    model = nn.init_mlp(dataset.X.shape[1], list(cfg.hidden_sizes),
                        dataset.n_classes,
                        seed=derive_seed(cfg.seed, "init"),
                        aux_classes=4 if cfg.ssl == "rotation" else None)
    state = nn.init_adam(model, dataclasses.replace(cfg.adam))
    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))

    gt_conflicting = dataset.conflicting()
    per_epoch = dataset.n // cfg.batch_size
    if per_epoch == 0:
        raise ValueError("batch size exceeds the dataset")
    total = cfg.epochs * per_epoch

    rows = {"g_aligned": [], "g_conflicting": [], "ratio": [], "skipped": [],
            "gt_a": [], "gt_c": []}
    epoch_trace = []
    skipped_count = 0

    for t in range(1, total + 1):
        if (t - 1) % per_epoch == 0:
            perm = rng.permutation(dataset.n)
        lo = ((t - 1) % per_epoch) * cfg.batch_size
        idx = perm[lo:lo + cfg.batch_size]
        Xb, yb = dataset.X[idx], dataset.y[idx]
        conf_b = partition[idx]

        probs = nn.prob_of_label(nn.forward(model, Xb), yb)
        contrib = grad_contribution(probs)
        rows["g_aligned"].append(float(contrib[~conf_b].sum()))
        rows["g_conflicting"].append(float(contrib[conf_b].sum()))
        gt_b = gt_conflicting[idx]
        rows["gt_a"].append(float(contrib[~gt_b].sum()))
        rows["gt_c"].append(float(contrib[gt_b].sum()))

        ratio = None
        skip = False
        if cfg.strategy == "ga":
            if cfg.force_ratio is not None:
                ratio = cfg.force_ratio
            else:
                ratio = ga_ratio(probs, conf_b, cfg.gamma)
                skip = ratio is None
        rows["ratio"].append(np.nan if ratio is None else ratio)
        rows["skipped"].append(skip)
        if skip:
            skipped_count += 1
        else:
            weights = build_iteration_loss(
                cfg.strategy, conf_b, ratio=ratio, aligned_weight=aligned_weight,
                scores=None if scores is None else scores[idx])
            grad = nn.weighted_cross_entropy_backward(model, Xb, yb, weights)
            if cfg.ssl == "rotation":
                _, rot_grad = rotation_loss(model, Xb, dataset.image_shape)
                grad.add_scaled(rot_grad, cfg.ssl_weight)
            nn.adam_step(model, grad, state)
            if not model.all_finite():
                raise TrainingDivergedError(t)

        if eval_set is not None and t % per_epoch == 0:
            entry = _epoch_eval(model, eval_set)
            entry["epoch"] = t // per_epoch
            epoch_trace.append(entry)

    telemetry = TrainTelemetry(
        iterations=np.arange(1, total + 1),
        g_aligned=np.array(rows["g_aligned"]),
        g_conflicting=np.array(rows["g_conflicting"]),
        ratio=np.array(rows["ratio"]),
        skipped=np.array(rows["skipped"], dtype=bool),
        gt_g_aligned=np.array(rows["gt_a"]),
        gt_g_conflicting=np.array(rows["gt_c"]),
        epoch_trace=epoch_trace,
        skipped_count=skipped_count)
    return model, telemetry


# -- telemetry files ---------------------------------------------------------------

def save_telemetry(path, telemetry):
    """One row per iteration: iter, g_aligned, g_conflicting, r, skipped."""
    lines = ["iter,g_aligned,g_conflicting,r,skipped"]
    for i, it in enumerate(telemetry.iterations):
        r = telemetry.ratio[i]
        r_txt = "" if np.isnan(r) else repr(float(r))
        lines.append(f"{int(it)},{float(telemetry.g_aligned[i])!r},"
                     f"{float(telemetry.g_conflicting[i])!r},{r_txt},"
                     f"{int(telemetry.skipped[i])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_telemetry(path):
    """Inverse of save_telemetry (file columns only; traces stay in memory)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "iter,g_aligned,g_conflicting,r,skipped":
        raise ValueError(f"{path}: not a telemetry table")
    rows = [line.split(",") for line in lines[1:] if line]
    n = len(rows)
    tel = TrainTelemetry(
        iterations=np.array([int(r[0]) for r in rows]),
        g_aligned=np.array([float(r[1]) for r in rows]),
        g_conflicting=np.array([float(r[2]) for r in rows]),
        ratio=np.array([float(r[3]) if r[3] else np.nan for r in rows]),
        skipped=np.array([bool(int(r[4])) for r in rows]),
        gt_g_aligned=np.full(n, np.nan),
        gt_g_conflicting=np.full(n, np.nan),
        epoch_trace=[])
    tel.skipped_count = int(tel.skipped.sum())
    return tel
