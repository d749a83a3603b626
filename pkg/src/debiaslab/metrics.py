"""Evaluation: group-averaged accuracy, scoring quality, binary fairness.

Empty groups and undefined rates are reported as None ("absent") rather
than coerced to 0; fabricating a number on a degenerate split hides bugs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


class EmptyGroupError(ValueError):
    def __init__(self, group):
        self.group = group
        super().__init__(f"no samples in (target, bias) group {group}")


@dataclass
class MetricsReport:
    """Flat bundle of everything the harness reports per run."""

    unbiased_acc: float | None = None
    group_accs: dict | None = None          # (target, bias) -> accuracy
    aligned_acc: float | None = None
    conflicting_acc: float | None = None
    four_group_accs: dict | None = None     # multi-bias alignment pattern -> acc
    ap: float | None = None
    pr_curve: list | None = None            # [(recall, precision), ...]
    precision_at_tau: float | None = None
    recall_at_tau: float | None = None
    tau: float | None = None
    dp: float | None = None
    eqopp0: float | None = None
    eqopp1: float | None = None
    eqodd: float | None = None


def _as_1d(*arrays):
    out = [np.asarray(a) for a in arrays]
    n = out[0].shape[0]
    if any(a.ndim != 1 or a.shape[0] != n for a in out):
        raise ValueError("inputs must be 1-d arrays of equal length")
    return out


def unbiased_accuracy(preds, targets, bias_labels):
    """Accuracy per (target, bias) group, averaged with equal group weight.

    Every combination of observed target and bias values must be populated;
    an empty cell raises EmptyGroupError naming the cell.
    """
    preds, targets, bias_labels = _as_1d(preds, targets, bias_labels)
    t_vals = np.unique(targets)
    b_vals = np.unique(bias_labels)
    groups = {}
    for t in t_vals:
        for b in b_vals:
            mask = (targets == t) & (bias_labels == b)
            if not mask.any():
                raise EmptyGroupError((int(t), int(b)))
            groups[(int(t), int(b))] = float((preds[mask] == t).mean())
    overall = float(np.mean(list(groups.values())))
    return overall, groups


def split_accuracy(preds, targets, alignment_flags):
    """(aligned accuracy, conflicting accuracy); an empty side is None."""
    preds, targets, alignment_flags = _as_1d(preds, targets, alignment_flags)
    alignment_flags = alignment_flags.astype(bool)
    correct = preds == targets
    aligned = float(correct[alignment_flags].mean()) if alignment_flags.any() else None
    conf = float(correct[~alignment_flags].mean()) if (~alignment_flags).any() else None
    return aligned, conf


def group_accuracies(preds, targets, group_ids):
    """Accuracy per group id plus their unweighted mean (multi-bias eval)."""
    preds, targets, group_ids = _as_1d(preds, targets, group_ids)
    accs = {}
    for g in np.unique(group_ids):
        mask = group_ids == g
        accs[int(g)] = float((preds[mask] == targets[mask]).mean())
    return float(np.mean(list(accs.values()))), accs


def average_precision(scores, flags):
    """Non-interpolated AP over a ranking by descending score.

    Ties break by sample index (stable sort), so equal inputs always give
    the same ranking. Returns (ap, [(recall, precision) per rank]).
    """
    scores, flags = _as_1d(scores, flags)
    flags = flags.astype(bool)
    n_pos = int(flags.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive flag")
    order = np.argsort(-scores, kind="stable")
    hits = flags[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    precision = tp / ranks
    recall = tp / n_pos
    # recall increases exactly at positive ranks; each step is 1/n_pos
    ap = float(precision[hits].sum() / n_pos)
    curve = list(zip(recall.tolist(), precision.tolist()))
    return ap, curve


def precision_recall_at(scores, flags, tau):
    """Precision/recall of {score >= tau} against the flags.

    No retrieved samples -> precision None; no positive flags -> recall None.
    """
    scores, flags = _as_1d(scores, flags)
    flags = flags.astype(bool)
    retrieved = scores >= tau
    n_ret = int(retrieved.sum())
    n_pos = int(flags.sum())
    tp = int((retrieved & flags).sum())
    precision = tp / n_ret if n_ret else None
    recall = tp / n_pos if n_pos else None
    return precision, recall


def _rate(preds, mask):
    """p(pred = 1 | mask), or None when the condition has no support."""
    if not mask.any():
        return None
    return float((preds[mask] == 1).mean())


def fairness_binary(preds, targets, bias_labels):
    """DP, EqOpp0, EqOpp1, EqOdd for binary target/bias/predictions.

    DP      = 1 - |p(y'=1|b=1) - p(y'=1|b=0)|
    EqOpp1  = 1 - |p(y'=1|y=1,b=0) - p(y'=1|y=1,b=1)|
    EqOpp0  = 1 - |p(y'=1|y=0,b=0) - p(y'=1|y=0,b=1)|
    EqOdd   = 0.5 (EqOpp0 + EqOpp1)
    Terms whose conditioning cell is empty come back None, as does EqOdd
    when either side is missing.
    """
    preds, targets, bias_labels = _as_1d(preds, targets, bias_labels)
    for name, arr in (("preds", preds), ("targets", targets), ("bias", bias_labels)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be binary 0/1")

    def gap(a, b):
        if a is None or b is None:
            return None
        return 1.0 - abs(a - b)

    dp = gap(_rate(preds, bias_labels == 1), _rate(preds, bias_labels == 0))
    eqopp1 = gap(_rate(preds, (targets == 1) & (bias_labels == 0)),
                 _rate(preds, (targets == 1) & (bias_labels == 1)))
    eqopp0 = gap(_rate(preds, (targets == 0) & (bias_labels == 0)),
                 _rate(preds, (targets == 0) & (bias_labels == 1)))
    eqodd = None if eqopp0 is None or eqopp1 is None else 0.5 * (eqopp0 + eqopp1)
    return dp, eqopp0, eqopp1, eqodd


# -- serialization -------------------------------------------------------------

def _fmt(value):
    if value is None:
        return "absent"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_to_text(report):
    """Nested key-value rendering; dict-valued fields get indented rows."""
    lines = []
    for f in fields(report):
        value = getattr(report, f.name)
        if value is None:
            lines.append(f"{f.name}: absent")
        elif isinstance(value, dict):
            lines.append(f"{f.name}:")
            for k in sorted(value):
                lines.append(f"  {k}: {_fmt(value[k])}")
        elif f.name == "pr_curve":
            lines.append(f"pr_curve: {len(value)} points")
        else:
            lines.append(f"{f.name}: {_fmt(value)}")
    return "\n".join(lines) + "\n"


CSV_FIELDS = ["unbiased_acc", "aligned_acc", "conflicting_acc", "ap",
              "precision_at_tau", "recall_at_tau", "tau", "dp", "eqopp0",
              "eqopp1", "eqodd"]


def report_csv_row(report):
    """Flat scalar row (dicts and curves excluded); None -> empty cell."""
    cells = []
    for name in CSV_FIELDS:
        value = getattr(report, name)
        cells.append("" if value is None else repr(float(value)))
    return ",".join(cells)
