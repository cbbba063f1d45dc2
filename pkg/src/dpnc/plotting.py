"""Matplotlib helpers that write byte-stable SVG files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "svg.hashsalt": "dpnc",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.4),
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def rate_plot(path, ns, per_trial: dict, medians, slope: float, intercept: float) -> None:
    """Log-log scatter of per-trial values, one series per ``n``, plus the fitted line."""
    with matplotlib.rc_context(RC):
        fig, ax = plt.subplots()
        for n in ns:
            vals = np.asarray(per_trial.get(n, []), dtype=float)
            vals = vals[np.isfinite(vals) & (vals > 0)]
            ax.scatter(np.full(len(vals), n), vals, s=8, alpha=0.5, label=f"n={n}")
        ns_arr = np.asarray(ns, dtype=float)
        ax.plot(ns_arr, medians, "k.", ms=9, label="median")
        if np.isfinite(slope):
            ax.plot(ns_arr, np.exp(intercept) * ns_arr ** slope, "k--", lw=1,
                    label=f"fit slope {slope:.3f}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("n")
        ax.set_ylabel("certified gradient norm")
        ax.legend(fontsize=6, ncol=2)
        _save(fig, path)


def histogram_plot(path, values, xlabel: str, bins: int = 40) -> None:
    with matplotlib.rc_context(RC):
        fig, ax = plt.subplots()
        vals = np.asarray(values, dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            ax.hist(vals, bins=bins, color="0.35")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("count")
        _save(fig, path)
