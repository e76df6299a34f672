"""PNG figures written next to the exported CSV tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"figure.dpi": 120, "font.size": 9, "axes.grid": True, "grid.alpha": 0.3,
         "axes.spines.top": False, "axes.spines.right": False}
CLASS_COLORS = ("#4c72b0", "#dd8452", "#55a868")
CLASS_NAMES = ("normal", "GF at negative terminal", "GF inside string")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def loss_curves(curves: dict, path):
    """``curves`` maps run name to (epochs, ce, kl)."""
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
        for name, (ep, ce, kl) in sorted(curves.items()):
            a1.plot(ep, ce, lw=1, label=name)
            a2.plot(ep, kl, lw=1, label=name)
        a1.set(xlabel="epoch", ylabel="cross-entropy", yscale="log")
        a2.set(xlabel="epoch", ylabel="KL divergence")
        a2.legend(fontsize=6, frameon=False)
        return _save(fig, path)


def latent_scatter(latents: dict, path):
    """``latents`` maps run name to (z, labels); one panel per run."""
    names = sorted(latents)
    ncol = min(4, len(names))
    nrow = int(np.ceil(len(names) / ncol))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrow, ncol, figsize=(3 * ncol, 2.8 * nrow), squeeze=False)
        for ax, name in zip(axes.flat, names):
            z, lab = latents[name]
            for c in range(3):
                sel = lab == c
                ax.scatter(z[sel, 0], z[sel, 1], s=4, alpha=0.6, color=CLASS_COLORS[c],
                           label=CLASS_NAMES[c])
            ax.set(title=name, xlabel="z1", ylabel="z2")
        for ax in list(axes.flat)[len(names):]:
            ax.set_visible(False)
        axes.flat[0].legend(fontsize=6, markerscale=2, frameon=False)
        return _save(fig, path)


def summary_bars(rows: list, path):
    """Accuracy by rate for each feature set; ``rows`` are summary dicts."""
    sets = sorted({r["feature_set"] for r in rows})
    rates = sorted({r["rate"] for r in rows}, reverse=True)
    width = 0.8 / max(1, len(sets))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        x = np.arange(len(rates))
        for k, fs in enumerate(sets):
            acc = [next((r["accuracy"] for r in rows
                         if r["rate"] == rate and r["feature_set"] == fs), np.nan)
                   for rate in rates]
            ax.bar(x + k * width, np.array(acc) * 100, width, label=fs)
        ax.set_xticks(x + width * (len(sets) - 1) / 2, [f"{r / 1000:g} kHz" for r in rates])
        ax.set(ylabel="test accuracy (%)", ylim=(50, 100.5))
        ax.legend(frameon=False)
        return _save(fig, path)


def waveforms(record, path, channels=("Ipv_1_1", "Ipv_1_2", "Udc", "Uiso")):
    """Stacked channel traces with stage boundaries marked."""
    t = record.time * 1e3
    ig = record.fault_current()
    series = [(c, record.channels[c]) for c in channels] + [("Ig", ig)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(series), 1, figsize=(7, 1.6 * len(series)), sharex=True)
        for ax, (name, v) in zip(axes, series):
            ax.plot(t, v, lw=0.8)
            ax.set_ylabel(name)
            for b in record.stage_index[1:-1]:
                ax.axvline(t[min(b, len(t) - 1)], color="0.5", lw=0.6, ls="--")
        axes[-1].set_xlabel("time (ms)")
        return _save(fig, path)
