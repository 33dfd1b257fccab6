"""PNG figures rendered next to the CSV reports.

Everything draws on an explicit Agg canvas, so no pyplot state or display is
involved, and PNG metadata is stripped so reruns produce identical bytes.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .cashflow import CashflowSummary
from .validation import PredictiveCheck, SbcReport, rank_histogram, uniform_band

BAND_COLOR = "0.85"
BAR_COLOR = "#4c72b0"


def _new(nrows: int = 1, ncols: int = 1, width: float = 3.2, height: float = 2.4):
    fig = Figure(figsize=(width * ncols, height * nrows))
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False)
    return fig, axes


def _save(fig: Figure, path: str | Path) -> Path:
    p = Path(path)
    fig.tight_layout()
    fig.savefig(p, dpi=100, metadata={"Software": None})
    return p


def _grid(n: int) -> tuple[int, int]:
    ncols = min(n, 5)
    return math.ceil(n / ncols), ncols


def _band_bars(ax, counts, lo, hi, title: str) -> None:
    bins = len(counts)
    x = np.arange(bins)
    ax.fill_between(np.arange(bins + 1) - 0.5, np.append(lo, lo[-1]), np.append(hi, hi[-1]), step="post", color=BAND_COLOR, lw=0)
    ax.bar(x, counts, width=1.0, color=BAR_COLOR, edgecolor="white", lw=0.5)
    ax.set_title(title, fontsize=8)
    ax.set_xticks([])
    ax.tick_params(labelsize=7)


def rank_histograms(report: SbcReport, path: str | Path) -> Path:
    """One panel per tracked quantity, grey band = exact binomial interval per bin."""
    lo, hi = report.band()
    nrows, ncols = _grid(len(report.quantities))
    fig, axes = _new(nrows, ncols, 2.2, 1.7)
    for ax, q in zip(axes.flat, report.quantities):
        _band_bars(ax, report.histograms[q], lo, hi, f"{q} ({report.violations[q]})")
    for ax in list(axes.flat)[len(report.quantities):]:
        ax.set_visible(False)
    return _save(fig, path)


def calibration_histograms(percentiles: dict[str, np.ndarray], path: str | Path, bins: int = 20, level: float = 0.99) -> Path:
    """Histogram of predictive percentiles per model against the uniform band.

    Mass piling up near 1 means the truth tends to sit above the predictions,
    i.e. the model under-predicts.
    """
    fig, axes = _new(1, len(percentiles))
    for ax, (model, pct) in zip(axes.flat, percentiles.items()):
        counts = rank_histogram(np.asarray(pct), 1.0, bins, continuous=True)
        if counts.sum() >= bins:
            lo, hi = uniform_band(int(counts.sum()), bins, level)
        else:
            lo = hi = np.nan
        _band_bars(ax, counts, np.full(bins, lo), np.full(bins, hi), model)
        ax.set_xlabel("percentile of truth", fontsize=7)
    return _save(fig, path)


def cashflow_fan(summary: CashflowSummary, path: str | Path) -> Path:
    """Cumulative paid loss by lag, one panel per future accident year."""
    p = summary.paths
    qs = np.asarray(summary.quantiles)
    order = np.argsort(qs)
    k = len(p.accident_years)
    fig, axes = _new(1, k)
    lags = np.asarray(p.dev_lags, dtype=float)
    for col, ax in enumerate(axes.flat):
        cum = summary.cumulative[order, col, :]
        n = len(order)
        for a in range(n // 2):
            # outer bands lighter
            shade = 0.85 - 0.35 * a / max(1, n // 2 - 1)
            ax.fill_between(lags, cum[a], cum[n - 1 - a], color=str(shade), lw=0)
        if n % 2:
            ax.plot(lags, cum[n // 2], color="k", lw=1)
        ax.axhline(p.premiums[col], color="tab:red", lw=0.8, ls="--", zorder=3)
        ax.set_title(f"{p.triangle_id} AY {p.accident_years[col]}", fontsize=8)
        ax.set_xlabel("development lag", fontsize=7)
        ax.tick_params(labelsize=7)
    return _save(fig, path)


def predictive_overlay(check: PredictiveCheck, path: str | Path, rows: Sequence[int] | None = None) -> Path:
    """Replicated trajectories in grey with the observed cells on top, one panel per accident year."""
    k, n, m = check.trajectories.shape
    rows = list(range(n)) if rows is None else list(rows)
    nrows, ncols = _grid(len(rows))
    fig, axes = _new(nrows, ncols, 2.2, 1.7)
    lags = np.arange(1, m + 1)
    for ax, i in zip(axes.flat, rows):
        for r in range(k):
            ax.plot(lags, check.trajectories[r, i], color="0.6", lw=0.5, alpha=0.6)
        obs = check.observed[i]
        seen = np.isfinite(obs)
        ax.plot(lags[seen], obs[seen], "o", color="k", ms=2.5)
        ax.set_title(f"row {i + 1}", fontsize=8)
        ax.tick_params(labelsize=6)
    for ax in list(axes.flat)[len(rows):]:
        ax.set_visible(False)
    return _save(fig, path)
