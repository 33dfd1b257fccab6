"""Underwriting cashflows: walk forecast ultimates back through development factors."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class CashflowError(ValueError):
    pass


@dataclass
class CashflowPaths:
    """Cumulative loss paths ``(S, K, M)`` for ``K`` future accident years."""

    paths: np.ndarray
    premiums: np.ndarray
    accident_years: tuple = ()
    triangle_id: str = ""
    dev_lags: tuple = field(default=())

    def __post_init__(self) -> None:
        s, k, m = self.paths.shape
        self.premiums = np.asarray(self.premiums, dtype=float).reshape(-1)
        if self.premiums.shape != (k,):
            raise CashflowError(f"expected {k} premiums")
        if not self.accident_years:
            self.accident_years = tuple(range(1, k + 1))
        if not self.dev_lags:
            self.dev_lags = tuple(range(1, m + 1))

    @property
    def incremental(self) -> np.ndarray:
        return np.diff(self.paths, axis=2, prepend=0.0)


def walkback(ultimates, factors, premiums=None, **meta) -> CashflowPaths:
    """Divide each ultimate draw by its own factor draws, from the last lag backwards.

    ``ultimates`` is ``(S,)`` or ``(S, K)``; ``factors`` is ``(S, M-1)`` with
    column ``j-1`` the age-to-age factor from lag ``j`` to ``j+1``.
    """
    u = np.asarray(ultimates, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    f = np.asarray(factors, dtype=float)
    if f.ndim != 2:
        raise CashflowError("factors must be (draws, M-1)")
    if u.shape[0] != f.shape[0]:
        raise CashflowError(f"{u.shape[0]} ultimate draws but {f.shape[0]} factor draws; draws must be aligned")
    if np.any(~(f > 0)):
        s, j = np.argwhere(~(f > 0))[0]
        raise CashflowError(f"factor for lag {j + 1} at draw {s} is not positive")
    if np.any(~(u > 0)):
        raise CashflowError("ultimate draws must be > 0")
    s, k = u.shape
    m = f.shape[1] + 1
    paths = np.empty((s, k, m))
    paths[:, :, -1] = u
    for j in range(m - 2, -1, -1):
        paths[:, :, j] = paths[:, :, j + 1] / f[:, j][:, None]
    prem = np.ones(k) if premiums is None else premiums
    return CashflowPaths(paths, prem, **meta)


def forward(paths: CashflowPaths, factors) -> np.ndarray:
    """Re-apply the factors from the first lag; inverse of :func:`walkback`."""
    f = np.asarray(factors, dtype=float)
    out = paths.paths[:, :, 0].copy()
    for j in range(f.shape[1]):
        out = out * f[:, j][:, None]
    return out


SUMMARY_COLUMNS = ("triangle_id", "accident_year", "dev_lag", "quantile", "cumulative_paid", "incremental_paid", "net_position")


@dataclass
class CashflowSummary:
    quantiles: tuple[float, ...]
    cumulative: np.ndarray  # (Q, K, M)
    incremental: np.ndarray
    net: np.ndarray
    paths: CashflowPaths = field(repr=False)

    def rows(self):
        p = self.paths
        for q, qv in enumerate(self.quantiles):
            for k, ay in enumerate(p.accident_years):
                for j, lag in enumerate(p.dev_lags):
                    yield (
                        p.triangle_id,
                        ay,
                        lag,
                        qv,
                        repr(float(self.cumulative[q, k, j])),
                        repr(float(self.incremental[q, k, j])),
                        repr(float(self.net[q, k, j])),
                    )


def cashflow_summary(paths: CashflowPaths, quantiles: Sequence[float]) -> CashflowSummary:
    """Per-lag quantiles of cumulative and incremental paid loss and of premium minus paid.

    Quantiles interpolate linearly between order statistics.
    """
    qs = tuple(float(q) for q in quantiles)
    if not qs:
        raise CashflowError("at least one quantile is required")
    if any(not 0.0 <= q <= 1.0 for q in qs):
        raise CashflowError("quantiles must lie in [0, 1]")
    cum = np.quantile(paths.paths, qs, axis=0)
    inc = np.quantile(paths.incremental, qs, axis=0)
    net = np.quantile(paths.premiums[None, :, None] - paths.paths, qs, axis=0)
    return CashflowSummary(qs, cum, inc, net, paths)


def write_paths(path: str | Path, all_paths: Sequence[CashflowPaths]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("triangle_id", "accident_year", "draw", "dev_lag", "paid_loss"))
        for p in all_paths:
            s, k, m = p.paths.shape
            for kk, ay in enumerate(p.accident_years):
                for d in range(s):
                    for j, lag in enumerate(p.dev_lags):
                        w.writerow((p.triangle_id, ay, d, lag, repr(float(p.paths[d, kk, j]))))


def write_summary(path: str | Path, summaries: Sequence[CashflowSummary]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            w.writerows(s.rows())
