"""Report figures for scar-burden agreement.

Uses ``matplotlib.figure.Figure`` directly so no pyplot state or interactive
backend is involved; PNGs are rendered by Agg.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .metrics_eval import AgreementStats

_PNG_META = {"Software": None}  # keep files byte-stable across matplotlib builds


def correlation_plot(truth, estimate, path, r: float | None = None) -> Path:
    x, y = np.asarray(truth, float), np.asarray(estimate, float)
    fig = Figure(figsize=(4.5, 4.5), dpi=100)
    ax = fig.add_subplot()
    ax.scatter(x, y, s=18, color="tab:blue")
    lo = float(min(x.min(initial=0.0), y.min(initial=0.0)))
    hi = float(max(x.max(initial=1.0), y.max(initial=1.0)))
    ax.plot([lo, hi], [lo, hi], color="grey", lw=1, ls="--")
    if x.size >= 2 and np.ptp(x) > 0:
        slope, icept = np.polyfit(x, y, 1)
        ax.plot([lo, hi], [slope * lo + icept, slope * hi + icept], color="tab:red", lw=1)
    ax.set_xlabel("reference scar burden (%)")
    ax.set_ylabel("predicted scar burden (%)")
    ax.set_title(f"r = {r:.3f}" if r is not None else "r undefined")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    return Path(path)


def bland_altman_plot(truth, estimate, stats: AgreementStats, path) -> Path:
    x, y = np.asarray(truth, float), np.asarray(estimate, float)
    fig = Figure(figsize=(5, 4), dpi=100)
    ax = fig.add_subplot()
    ax.scatter((x + y) / 2, y - x, s=18, color="tab:blue")
    for level, style in ((stats.bias, "-"), (stats.loa_low, "--"), (stats.loa_high, "--")):
        ax.axhline(level, color="tab:red", lw=1, ls=style)
    ax.set_xlabel("mean of reference and predicted (%)")
    ax.set_ylabel("predicted - reference (%)")
    ax.set_title(f"bias {stats.bias:.2f}, limits [{stats.loa_low:.2f}, {stats.loa_high:.2f}]")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    return Path(path)
