"""Static figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    # no embedded timestamps, so repeated runs write identical files
    "svg.hashsalt": "birdsed",
}


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None, "Creation Time": None}
                if str(path).endswith(".png") else None)
    plt.close(fig)
    return path


def timeline_figure(timeline, path, max_width=16.0):
    """Species x seconds heat strip of probabilities; detections outlined."""
    probs = np.asarray(timeline.probs)
    T, C = probs.shape
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(min(max_width, 2 + 0.08 * max(T, 10)), 0.9 + 0.35 * C))
        im = ax.imshow(probs.T, aspect="auto", cmap="Greens", vmin=0, vmax=1, interpolation="nearest",
                       extent=(0, T, C - 0.5, -0.5))
        flags = timeline.flags.astype(bool)
        for c in range(C):
            runs = _runs(flags[:, c])
            for a, b in runs:
                ax.add_patch(plt.Rectangle((a, c - 0.45), b - a, 0.9, fill=False, lw=0.8, ec="black"))
        ax.set_yticks(range(C))
        ax.set_yticklabels(timeline.species)
        ax.set_xlabel("time (s)")
        note = "flags as exported" if timeline.threshold is None else f"threshold {timeline.threshold:g}"
        ax.set_title(f"{timeline.recording_id}  ({note})")
        fig.colorbar(im, ax=ax, fraction=0.025, pad=0.01, label="probability")
        return _save(fig, path)


def _runs(flags):
    runs, start = [], None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(flags)))
    return runs


def sweep_figure(curves: dict, path, mark_best=True):
    """F1 against binarization threshold, one line per model."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for label, curve in curves.items():
            taus = [t for t, m in curve.points if m.f1 is not None]
            f1 = [m.f1 for t, m in curve.points if m.f1 is not None]
            line, = ax.plot(taus, f1, label=label, lw=1.4)
            best = curve.best()
            if mark_best and best is not None:
                ax.plot([best[0]], [best[1].f1], "o", color=line.get_color(), ms=4)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("binarization threshold")
        ax.set_ylabel("F1 score")
        ax.legend(frameon=False)
        return _save(fig, path)


def history_figure(history, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        ep = [h["epoch"] for h in history]
        ax.plot(ep, [h["train_loss"] for h in history], label="train")
        ax.plot(ep, [h["val_loss"] for h in history], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("BCE loss")
        ax.legend(frameon=False)
        return _save(fig, path)
