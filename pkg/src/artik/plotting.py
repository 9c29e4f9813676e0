"""PNG figures written next to the CSV outputs of the command-line tools."""
from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "savefig.dpi": 120,
}


def figsize(scale=1.0, ratio=None):
    width = 6.4 * scale
    ratio = (np.sqrt(5.0) - 1.0) / 2.0 if ratio is None else ratio
    return (width, width * ratio)


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight")
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


def plot_joint_series(series: dict, dt: float, path, title="joint coordinates"):
    """One panel per joint; prismatic and revolute coordinates share the time axis."""
    labels = list(series)
    with plt.rc_context(STYLE):
        n = max(len(labels), 1)
        fig, axes = plt.subplots(n, 1, sharex=True, figsize=figsize(1.0, 0.35 * n + 0.2), squeeze=False)
        for ax, label in zip(axes[:, 0], labels):
            q = np.asarray(series[label])
            ax.plot(np.arange(len(q)) * dt, q, color="C0")
            ax.set_ylabel(label, rotation=0, ha="right", va="center")
        axes[-1, 0].set_xlabel("time [s]")
        axes[0, 0].set_title(title)
        return _save(fig, path)


def plot_loss_trace(trace, path, title="loss per particle"):
    """Loss of every particle against optimisation step (log scale when positive)."""
    trace = np.atleast_2d(np.asarray(trace, dtype=float))
    if trace.shape[0] == 1 and trace.shape[1] > 1:
        trace = trace.T
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        steps = np.arange(len(trace))
        for k in range(trace.shape[1]):
            ax.plot(steps, trace[:, k], color="C0", alpha=0.35, lw=0.8)
        ax.plot(steps, np.nanmin(trace, axis=1), color="C3", label="best")
        finite = trace[np.isfinite(trace)]
        if finite.size and finite.min() > 0:
            ax.set_yscale("log")
        elif finite.size:
            ax.set_yscale("symlog", linthresh=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_rewards(traces: dict, path, dt=0.05, title="reward"):
    """Per-step reward of each labelled episode."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        for i, (label, r) in enumerate(traces.items()):
            r = np.asarray(r)
            ax.plot(np.arange(1, len(r) + 1) * dt, r, color=f"C{i % 10}", alpha=0.8, label=label)
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("time [s]")
        ax.set_ylabel("reward")
        ax.set_title(title)
        if 0 < len(traces) <= 12:
            ax.legend(frameon=False, ncol=2)
        return _save(fig, path)


def plot_parameters(names, estimate, truth, lo, hi, path, title="normalised parameters"):
    """Estimated and true parameters on the unit interval of their limits."""
    lo = np.asarray(lo, dtype=float)
    span = np.asarray(hi, dtype=float) - lo
    est = (np.asarray(estimate, dtype=float) - lo) / span
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        x = np.arange(len(names))
        ax.bar(x - 0.2, est, 0.4, color="C0", label="estimate")
        if truth is not None:
            ax.bar(x + 0.2, (np.asarray(truth, dtype=float) - lo) / span, 0.4, color="C2", label="truth")
        ax.set_xticks(x, names, rotation=20, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("value within limits")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)
