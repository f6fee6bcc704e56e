"""Report figures, rendered off-screen to image files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CORR_LABELS = {"c00": "C(0,0)", "c10": "C(1,0)", "c01": "C(0,1)", "c11": "C(1,1)"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sudden(rows, path, freq_unit="MHz"):
    """Correlators versus detuning, one panel per displacement.

    ``rows`` are dicts with keys delta, source and the correlator columns.
    """
    fig, axes = plt.subplots(1, 4, figsize=(13, 3.2), sharex=True)
    sources = []
    for r in rows:
        if r["source"] not in sources:
            sources.append(r["source"])
    for ax, key in zip(axes, ("c00", "c10", "c01", "c11")):
        for src in sources:
            sel = [r for r in rows if r["source"] == src]
            d = [r["delta"] for r in sel]
            style = dict(lw=1.8) if src in ("nlce_resummed", "ed") else dict(lw=0.7, alpha=0.6)
            ls = "--" if src == "ed" else "-"
            ax.plot(d, [r[key + "_det"] for r in sel], ls, label=src, **style)
        ax.axhline(0, color="0.6", lw=0.5)
        ax.set_xlabel(f"detuning ({freq_unit})")
        ax.set_title(CORR_LABELS[key])
    axes[0].legend(fontsize=6)
    return _save(fig, path)


def plot_ramp(times, series, path, crossings=(), time_unit="us"):
    """Time series of correlators during a ramp; ``series`` maps label -> values."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, y in series.items():
        ax.plot(times, y, "o-", ms=3, label=label)
    for t in crossings:
        ax.axvline(t, color="0.5", ls=":", lw=1)
    ax.axhline(0, color="0.6", lw=0.5)
    ax.set_xlabel(f"time ({time_unit})")
    ax.set_ylabel("correlator")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_correlation_map(cmap, path, title="C(dx, dy)"):
    wx, wy = cmap.window
    img = cmap.matrix().copy()
    img[wy, wx] = np.nan  # the on-site value dwarfs the rest
    lim = np.nanmax(np.abs(img)) if np.isfinite(img).any() else 1.0
    fig, ax = plt.subplots(figsize=(4, 3.6))
    im = ax.imshow(img, origin="lower", cmap="RdBu_r", vmin=-lim, vmax=lim,
                   extent=(-wx - 0.5, wx + 0.5, -wy - 0.5, wy + 0.5))
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("dx")
    ax.set_ylabel("dy")
    ax.set_title(title)
    return _save(fig, path)


def plot_subsystem(stats, path):
    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(stats.classes)
    ax.bar(names, [stats.classes[k] for k in names], color=["C3", "C2", "C0", "0.6"])
    ax.set_ylabel("probability")
    ax.set_title(f"{stats.width}x{stats.height} patterns, enhancement {stats.enhancement:.2f}")
    return _save(fig, path)


def plot_fit(scan, model_values, report, path, freq_unit="MHz"):
    """Scan data with error bars and the best-fit model curves."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2), sharex=True)
    errs = scan.errors()
    for k, (ax, key) in enumerate(zip(axes, ("c00", "c10", "c01"))):
        ax.errorbar(scan.detunings, getattr(scan, key), yerr=None if errs is None else errs[k],
                    fmt="o", ms=3, label="scan")
        ax.plot(scan.detunings, model_values[k], "-", label="fit")
        ax.axhline(0, color="0.6", lw=0.5)
        ax.set_title(CORR_LABELS[key])
        ax.set_xlabel(f"detuning ({freq_unit})")
    axes[0].legend(fontsize=7)
    fig.suptitle(f"C6 = {report.c6:.3f}, alpha = {report.alpha:.3f}", fontsize=9)
    return _save(fig, path)


def plot_schedule(schedule, path, freq_unit="MHz", time_unit="us"):
    t, om, de = schedule.table().T
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(t, om, label="Omega")
    ax.plot(t, de, label="Delta")
    ax.set_xlabel(f"time ({time_unit})")
    ax.set_ylabel(freq_unit)
    ax.legend(fontsize=7)
    return _save(fig, path)
