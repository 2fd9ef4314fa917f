"""Report figures. Everything renders off-screen to PNG files."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "svg.hashsalt": "eegbrake",
}


def _figure(w=5.0, h=3.2, **kw):
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(w, h), **kw)


def save(fig, path) -> None:
    """Write a PNG with no timestamp or version metadata (stable bytes)."""
    with plt.rc_context(STYLE):
        fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_ersp(tf, path, title: str = "ERSP") -> None:
    fig, ax = _figure()
    lim = float(np.nanmax(np.abs(tf.values))) or 1.0
    mesh = ax.pcolormesh(tf.times_ms, tf.freqs_hz, tf.values, cmap="RdBu_r", vmin=-lim,
                         vmax=lim, shading="nearest")
    ax.axvline(0.0, color="k", lw=0.8, ls="--")
    ax.set_xlabel("time from onset (ms)")
    ax.set_ylabel("frequency (Hz)")
    ax.set_title(title)
    fig.colorbar(mesh, ax=ax, label="dB")
    fig.tight_layout()
    save(fig, path)


def plot_nu_histogram(nu_values: Sequence[float], path, threshold: float | None = None) -> None:
    fig, ax = _figure()
    ax.hist(np.asarray(nu_values, dtype=float), bins=np.linspace(0, 1, 21), color="0.5",
            edgecolor="k", lw=0.5)
    if threshold is not None:
        ax.axvline(threshold, color="C3", lw=1.0, label="selection cut")
        ax.legend(frameon=False)
    ax.set_xlabel(r"$\nu$")
    ax.set_ylabel("components")
    fig.tight_layout()
    save(fig, path)


def plot_horizon_sweep(sweeps: Mapping[str, Mapping[int, float]], path) -> None:
    """One line per subject: mean nu against the prediction horizon."""
    fig, ax = _figure()
    for name, sweep in sorted(sweeps.items()):
        h = sorted(sweep)
        ax.plot(h, [sweep[k] for k in h], marker="o", lw=1.0, label=name)
    ax.set_xlabel(r"$\Delta t$ (ms)")
    ax.set_ylabel(r"mean $\nu$")
    if len(sweeps) <= 10:
        ax.legend(frameon=False)
    fig.tight_layout()
    save(fig, path)


def plot_wss(wss: Mapping[int, float], path) -> None:
    fig, ax = _figure()
    k = sorted(wss)
    ax.plot(k, [wss[i] for i in k], marker="o", color="k", lw=1.0)
    ax.set_xlabel("K")
    ax.set_ylabel("WSS")
    ax.set_xticks(k)
    fig.tight_layout()
    save(fig, path)


def plot_scalp_maps(maps, path, titles: Sequence[str] | None = None, ncols: int = 5) -> None:
    n = len(maps)
    nrows = max(1, -(-n // ncols))
    fig, axes = _figure(1.6 * min(n, ncols), 1.7 * nrows, nrows=nrows,
                        ncols=min(n, ncols), squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        ax.set_axis_off()
        if i >= n:
            continue
        g = maps[i].grid
        lim = float(np.nanmax(np.abs(g))) or 1.0
        ax.imshow(g, origin="lower", extent=(-1, 1, -1, 1), cmap="RdBu_r", vmin=-lim,
                  vmax=lim)
        ax.add_patch(plt.Circle((0, 0), 1.0, fill=False, lw=0.8))
        ax.plot([-0.1, 0, 0.1], [0.99, 1.12, 0.99], color="k", lw=0.8)
        if titles is not None:
            ax.set_title(titles[i], fontsize=7)
    fig.tight_layout()
    save(fig, path)


def plot_prediction(traces, path, labels: Sequence[str] | None = None) -> None:
    """Measured brake against predictions; ``traces`` share one trial."""
    fig, ax = _figure(6.0, 3.0)
    first = traces[0]
    ax.plot(first.timestamps_ms, first.measured, color="k", lw=1.2, label="measured")
    for i, tr in enumerate(traces):
        lab = labels[i] if labels is not None else f"model {i}"
        ax.plot(tr.timestamps_ms, tr.predicted, lw=1.0, label=lab)
    ax.set_xlabel("epoch time (ms)")
    ax.set_ylabel("braking intensity")
    ax.legend(frameon=False)
    fig.tight_layout()
    save(fig, path)


def plot_ablation(reports, path) -> None:
    """Bar chart of RMSE per feature source (mean over subjects)."""
    groups: dict[str, list[float]] = {}
    for r in reports:
        groups.setdefault(r.feature_source, []).append(r.rmse)
    names = list(groups)
    means = [float(np.mean(groups[k])) for k in names]
    errs = [float(np.std(groups[k])) for k in names]
    fig, ax = _figure(5.5, 3.2)
    ax.bar(range(len(names)), means, yerr=errs, color="0.6", edgecolor="k", lw=0.5,
           capsize=2)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("RMSE")
    fig.tight_layout()
    save(fig, path)
