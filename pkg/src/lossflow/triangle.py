"""Loss triangles: data model, long-CSV ingestion and masking utilities."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_COLUMNS = (
    "triangle_id",
    "line",
    "accident_year",
    "dev_lag",
    "cumulative_loss",
    "earned_premium",
)

KNOWN_LINES = ("PP", "WC", "CA", "OO")


class TriangleError(ValueError):
    """Raised when triangle data violate the data model."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Triangle:
    """Cumulative-loss run-off triangle with per-accident-year premiums.

    ``losses`` is an ``(N, M)`` array with ``nan`` for unobserved cells. Rows
    are accident years, columns development lags; both use 0-based array
    positions while :meth:`cell` takes the 1-based ``(i, j)`` of the domain.
    """

    id: str
    line: str
    losses: np.ndarray
    premiums: np.ndarray
    accident_years: tuple = ()
    dev_lags: tuple = ()

    def __post_init__(self) -> None:
        losses = _frozen(self.losses)
        premiums = _frozen(self.premiums)
        if losses.ndim != 2:
            raise TriangleError(f"{self.id}: losses must be 2-D")
        n, m = losses.shape
        if premiums.shape != (n,):
            raise TriangleError(f"{self.id}: expected {n} premiums, got {premiums.shape}")
        if np.any(~np.isfinite(premiums)) or np.any(premiums <= 0):
            bad = int(np.flatnonzero(~(premiums > 0))[0]) + 1
            raise TriangleError(f"{self.id}: premium for accident year i={bad} must be > 0")
        obs = ~np.isnan(losses)
        bad = obs & ~(losses > 0)
        if bad.any():
            i, j = np.argwhere(bad)[0] + 1
            raise TriangleError(f"{self.id}: loss at cell (i={i}, j={j}) must be > 0")
        for i in range(n):
            row = obs[i]
            k = int(row.sum())
            if k == 0 or not row[:k].all():
                raise TriangleError(
                    f"{self.id}: accident year i={i + 1} must hold a contiguous run of lags starting at 1"
                )
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "premiums", premiums)
        if not self.accident_years:
            object.__setattr__(self, "accident_years", tuple(range(1, n + 1)))
        if not self.dev_lags:
            object.__setattr__(self, "dev_lags", tuple(range(1, m + 1)))

    @property
    def n_accident_years(self) -> int:
        return self.losses.shape[0]

    @property
    def n_dev_lags(self) -> int:
        return self.losses.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.losses)

    @property
    def row_lengths(self) -> np.ndarray:
        return self.observed.sum(axis=1)

    @property
    def n_cells(self) -> int:
        return int(self.observed.sum())

    @property
    def is_full_square(self) -> bool:
        return bool(self.observed.all())

    @property
    def is_runoff(self) -> bool:
        n, m = self.losses.shape
        expected = np.minimum(m, n - np.arange(n))
        return bool(np.array_equal(self.row_lengths, expected))

    def cell(self, i: int, j: int) -> float:
        """Loss at 1-based accident year ``i`` and lag ``j`` (``nan`` if unobserved)."""
        if not (1 <= i <= self.n_accident_years and 1 <= j <= self.n_dev_lags):
            raise IndexError(f"cell ({i}, {j}) outside {self.losses.shape}")
        return float(self.losses[i - 1, j - 1])

    @property
    def cells(self) -> dict[tuple[int, int], float]:
        return {(int(i) + 1, int(j) + 1): float(self.losses[i, j]) for i, j in np.argwhere(self.observed)}

    def latest(self) -> np.ndarray:
        """Most recent observed cumulative loss per accident year."""
        idx = self.row_lengths - 1
        return self.losses[np.arange(self.n_accident_years), idx]

    def replace(self, **changes) -> "Triangle":
        kw = dict(
            id=self.id,
            line=self.line,
            losses=self.losses,
            premiums=self.premiums,
            accident_years=self.accident_years,
            dev_lags=self.dev_lags,
        )
        kw.update(changes)
        return Triangle(**kw)


@dataclass(frozen=True, eq=False)
class LossRatioSeries:
    triangle_id: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen(self.values))


def loss_ratios(t: Triangle) -> LossRatioSeries:
    return LossRatioSeries(t.id, t.losses / t.premiums[:, None])


def to_runoff(t: Triangle, as_of: int | None = None) -> Triangle:
    """Mask a triangle to run-off form.

    Row ``i`` keeps lags ``1..min(as_of, N - i + 1)``; ``as_of`` defaults to
    the number of lags and also becomes the lag count of the result.
    """
    n, m = t.losses.shape
    as_of = m if as_of is None else int(as_of)
    if not 1 <= as_of <= m:
        raise TriangleError(f"as_of={as_of} outside 1..{m}")
    keep = np.minimum(as_of, n - np.arange(n))
    j = np.arange(as_of)
    mask = j[None, :] < keep[:, None]
    losses = np.where(mask, t.losses[:, :as_of], np.nan)
    if np.isnan(losses[mask]).any():
        raise TriangleError(f"{t.id}: cannot form run-off triangle, source cells missing")
    return t.replace(losses=losses, dev_lags=t.dev_lags[:as_of])


def _parse_positive(value: str, what: str, where: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise TriangleError(f"{where}: {what} {value!r} is not a number") from None
    if not np.isfinite(x) or x <= 0:
        raise TriangleError(f"{where}: {what} must be > 0, got {value}")
    return x


def load_triangles(path: str | Path) -> list[Triangle]:
    """Read a long-format CSV (one row per cell) into triangles, in file order."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise TriangleError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)

    order: list[str] = []
    lines: dict[str, str] = {}
    cells: dict[str, dict[tuple[str, str], float]] = defaultdict(dict)
    prem: dict[str, dict[str, float]] = defaultdict(dict)
    for lineno, row in enumerate(rows, start=2):
        tid = row["triangle_id"].strip()
        ay, lag = row["accident_year"].strip(), row["dev_lag"].strip()
        where = f"{path.name}:{lineno} (triangle {tid}, accident_year {ay}, dev_lag {lag})"
        loss = _parse_positive(row["cumulative_loss"], "cumulative_loss", where)
        p = _parse_positive(row["earned_premium"], "earned_premium", where)
        if tid not in lines:
            order.append(tid)
            lines[tid] = row["line"].strip()
        elif lines[tid] != row["line"].strip():
            raise TriangleError(f"{where}: line changes within triangle")
        if (ay, lag) in cells[tid]:
            raise TriangleError(f"{where}: duplicate cell")
        cells[tid][(ay, lag)] = loss
        if ay in prem[tid] and prem[tid][ay] != p:
            raise TriangleError(f"{where}: inconsistent premium for accident year")
        prem[tid][ay] = p

    out = []
    for tid in order:
        years = sorted(prem[tid], key=_sort_key)
        lags = sorted({lag for _, lag in cells[tid]}, key=_sort_key)
        yi = {y: k for k, y in enumerate(years)}
        lj = {g: k for k, g in enumerate(lags)}
        losses = np.full((len(years), len(lags)), np.nan)
        for (ay, lag), v in cells[tid].items():
            losses[yi[ay], lj[lag]] = v
        premiums = np.array([prem[tid][y] for y in years])
        out.append(
            Triangle(
                id=tid,
                line=lines[tid],
                losses=losses,
                premiums=premiums,
                accident_years=tuple(_label(y) for y in years),
                dev_lags=tuple(_label(g) for g in lags),
            )
        )
    return out


def _sort_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def _label(s: str):
    try:
        return int(s)
    except ValueError:
        return s


def triangle_rows(t: Triangle) -> Iterable[tuple]:
    for i, j in np.argwhere(t.observed):
        yield (
            t.id,
            t.line,
            t.accident_years[i],
            t.dev_lags[j],
            repr(float(t.losses[i, j])),
            repr(float(t.premiums[i])),
        )


def write_triangles(path: str | Path, triangles: Sequence[Triangle]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for t in triangles:
            w.writerows(triangle_rows(t))


def group_by_line(triangles: Iterable[Triangle]) -> dict[str, list[Triangle]]:
    groups: dict[str, list[Triangle]] = {}
    for t in triangles:
        groups.setdefault(t.line, []).append(t)
    return groups
