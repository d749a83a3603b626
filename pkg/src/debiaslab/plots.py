"""Vector-graphic summaries: accuracy curves, gradient traces, PR curves.

Everything renders through the Agg backend into standalone SVG files, so
plotting works headless and never touches a display.
"""

import warnings

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def accuracy_curves(traces, path, title="unbiased accuracy by epoch"):
    """traces: {label: [per-epoch dicts with 'epoch' and 'unbiased']}."""
    if not traces:
        warnings.warn("no accuracy traces to plot; nothing written")
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, trace in traces.items():
        xs = [e["epoch"] for e in trace]
        ys = [e["unbiased"] for e in trace]
        ax.plot(xs, ys, label=label, linewidth=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("unbiased accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path


def gradient_traces(telemetry, gamma, path, title="gradient contributions"):
    """Per-iteration aligned vs conflicting contribution sums.

    When alignment ratios are present the reweighted aligned trace
    (r * g_aligned) is drawn too; by construction it coincides with
    g_conflicting / gamma on every non-skipped iteration.
    """
    if telemetry is None or len(telemetry.iterations) == 0:
        warnings.warn("empty telemetry; nothing written")
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    it = telemetry.iterations
    ax.plot(it, telemetry.g_aligned, label="aligned", linewidth=0.8)
    ax.plot(it, telemetry.g_conflicting, label="conflicting", linewidth=0.8)
    if np.isfinite(telemetry.ratio).any():
        ax.plot(it, telemetry.ratio * telemetry.g_aligned,
                label="aligned * r", linewidth=0.8, linestyle="--")
        ax.plot(it, telemetry.g_conflicting / gamma,
                label="conflicting / gamma", linewidth=0.8, linestyle=":")
    ax.set_xlabel("iteration")
    ax.set_ylabel("sum of 2 - 2p over group")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path


def pr_curves(curves, path, title="score precision-recall"):
    """curves: {label: [(recall, precision), ...]} as produced by the AP op."""
    if not curves:
        warnings.warn("no PR curves to plot; nothing written")
        return None
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for label, pts in curves.items():
        pts = np.asarray(pts, dtype=np.float64)
        ax.plot(pts[:, 0], pts[:, 1], label=label, linewidth=1.2)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.02)
    ax.set_ylim(0.0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    ax.grid(alpha=0.3)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path
