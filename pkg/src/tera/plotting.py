"""Report figures rendered to files with the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_WIDTH = 6.4
STYLE = {
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(history, path, title="pre-training loss"):
    """L1 loss (left axis) and learning rate (right axis) against step.

    ``history`` rows are ``(step, loss, lr)``.
    """
    h = np.asarray(history, dtype=np.float64).reshape(-1, 3)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(FIG_WIDTH, 3.2))
        ax.plot(h[:, 0], h[:, 1], lw=0.8, color="C0", label="L1 loss")
        ax.set_xlabel("step")
        ax.set_ylabel("L1 loss")
        ax2 = ax.twinx()
        ax2.plot(h[:, 0], h[:, 2], lw=0.8, color="C1", ls="--", label="learning rate")
        ax2.set_ylabel("learning rate")
        ax2.grid(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="upper right", frameon=False)
        ax.set_title(title)
        return _save(fig, path)


def alteration_panels(x, x_altered, record, path, prediction=None):
    """Original, altered and (optionally) reconstructed features side by side.

    Altered time blocks and the channel band are outlined on the altered panel.
    """
    panels = [("original", x), ("altered", x_altered)]
    if prediction is not None:
        panels.append(("reconstruction", prediction))
    lo = min(float(np.min(p)) for _, p in panels)
    hi = max(float(np.max(p)) for _, p in panels)
    with plt.rc_context(STYLE | {"axes.grid": False}):
        fig, axes = plt.subplots(len(panels), 1, figsize=(FIG_WIDTH, 1.6 * len(panels) + 0.6), sharex=True)
        for ax, (name, m) in zip(axes, panels):
            im = ax.imshow(np.asarray(m).T, origin="lower", aspect="auto", vmin=lo, vmax=hi, cmap="viridis", interpolation="nearest")
            ax.set_ylabel(f"{name}\nchannel")
        ax_alt = axes[1]
        for b in record.time_blocks:
            colour = {"mask_zero": "w", "replace": "r", "keep": "0.6"}[b.mode]
            ax_alt.axvspan(b.start - 0.5, b.start + b.width - 0.5, fill=False, ec=colour, lw=0.8)
        if record.channel_block is not None:
            start, width = record.channel_block
            ax_alt.axhspan(start - 0.5, start + width - 0.5, fill=False, ec="w", lw=0.8, ls="--")
        axes[-1].set_xlabel("frame")
        fig.colorbar(im, ax=list(axes), shrink=0.8)
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        return path


def probe_bars(reports, path, title="probe accuracy"):
    """Test accuracy per report with the chance level drawn as a dashed line."""
    labels = [r.label or r.spec.task for r in reports]
    acc = [100.0 * r.test_accuracy for r in reports]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.2, 0.8 * len(reports) + 1.5), 3.2))
        pos = np.arange(len(reports))
        ax.bar(pos, acc, color="C0", width=0.6)
        for p, r in zip(pos, reports):
            ax.hlines(100.0 * r.chance, p - 0.4, p + 0.4, colors="k", linestyles="--", lw=0.8)
        ax.set_xticks(pos)
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel("test accuracy (%)")
        ax.set_ylim(0, 100)
        ax.set_title(title)
        return _save(fig, path)
