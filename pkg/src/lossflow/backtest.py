"""Leave-future-out backtest: split, develop, forecast and score.

Each full-square triangle is cut to run-off form. The development models
produce ultimates for every accident year but the last; the forecasters fit
those and are scored on

* the test split: accident years ``2..N-1`` against their lag-``M`` losses,
  predicted in sample;
* the validation split: the last accident year, forecast one step ahead.

The first year's lag-``M`` loss is the only observed ultimate and feeds the
empirical prior of the measurement model.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .development import DevConfig, DevelopmentError, UltimateSummary, _prepare as _prepare_dev
from .development import fit_development, simulate_development
from .forecasting import (
    HierarchicalConfig,
    MeasurementErrorInput,
    Program,
    fit_forecast,
    fit_hierarchical,
    forecast,
    log_predictive_density,
    posterior_predictive,
    program_draws,
)
from .inference import DrawMatrix, SamplerConfig, max_rhat
from .triangle import Triangle, group_by_line, to_runoff
from .validation import band_violations, rank_histogram

logger = logging.getLogger(__name__)

SPLITS = ("test", "validation")
SCORE_COLUMNS = ("line", "triangle_id", "model", "split", "accident_year", "lpd", "rmse", "percentile")


class BacktestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# split


@dataclass(frozen=True)
class BacktestSplit:
    full: Triangle
    train: Triangle
    observed_row: int
    test_rows: tuple[int, ...]
    validation_row: int

    @property
    def ultimates(self) -> np.ndarray:
        return self.full.losses[:, -1]

    @property
    def observed_ratio(self) -> float:
        return float(self.full.losses[self.observed_row, -1] / self.full.premiums[self.observed_row])

    def counts(self) -> dict[str, int]:
        return {
            "train": self.train.n_cells,
            "observed": 1,
            "test": len(self.test_rows),
            "validation": 1,
        }


def make_split(t: Triangle, test_rows: Sequence[int] | None = None) -> BacktestSplit:
    """Split a full square into run-off training cells and held-out ultimates.

    ``test_rows`` are 1-based accident years; the default is ``2..N-1``.
    """
    n, m = t.losses.shape
    if not t.is_full_square:
        raise BacktestError(f"{t.id}: backtest needs a full-square triangle")
    if n != m or n < 3:
        raise BacktestError(f"{t.id}: backtest needs N = M >= 3, got {n}x{m}")
    rows = tuple(range(2, n)) if test_rows is None else tuple(int(r) for r in test_rows)
    if any(not 2 <= r <= n - 1 for r in rows):
        raise BacktestError(f"{t.id}: test rows must lie in 2..{n - 1}")
    return BacktestSplit(
        full=t,
        train=to_runoff(t),
        observed_row=0,
        test_rows=tuple(r - 1 for r in rows),
        validation_row=n - 1,
    )


# ---------------------------------------------------------------------------
# scores


def lpd(log_densities) -> float:
    """Log of the Monte Carlo mean density, ``logsumexp(log p) - log S``."""
    a = np.asarray(log_densities, dtype=float).reshape(-1)
    if a.size == 0:
        raise BacktestError("no draws")
    if np.all(a == -np.inf):
        return -np.inf
    return float(logsumexp(a) - np.log(a.size))


def rmse(true_value: float, draws) -> float:
    d = np.asarray(draws, dtype=float).reshape(-1)
    if d.size == 0:
        raise BacktestError("no draws")
    return float(np.sqrt(np.mean((d - true_value) ** 2)))


def percentile(true_value: float, draws) -> float:
    """Fraction of predictive draws strictly below the true value."""
    d = np.asarray(draws, dtype=float).reshape(-1)
    if d.size == 0:
        raise BacktestError("no draws")
    return float(np.mean(d < true_value))


@dataclass(frozen=True)
class ScoreRow:
    line: str
    triangle_id: str
    model: str
    split: str
    accident_year: object
    lpd: float
    rmse: float
    percentile: float


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def select(self, model: str | None = None, split: str | None = None, line: str | None = None) -> list[ScoreRow]:
        return [
            r
            for r in self.rows
            if (model is None or r.model == model)
            and (split is None or r.split == split)
            and (line is None or r.line == line)
        ]

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.rows))

    @property
    def lines(self) -> list[str]:
        return list(dict.fromkeys(r.line for r in self.rows))

    def pointwise(self, model: str, split: str, line: str | None = None) -> dict[tuple, float]:
        return {(r.triangle_id, r.accident_year): r.lpd for r in self.select(model, split, line)}

    def elpd(self, model: str, split: str = "validation", line: str | None = None) -> float:
        return float(sum(r.lpd for r in self.select(model, split, line)))

    def lpd_matrix(self, models: Sequence[str], split: str = "test", line: str | None = None):
        cols = [self.pointwise(m, split, line) for m in models]
        keys = list(cols[0])
        for m, c in zip(models, cols):
            if set(c) != set(keys):
                raise BacktestError(f"model {m} was scored on a different {split} set")
        return keys, np.array([[c[k] for c in cols] for k in keys])

    def percentiles(self, model: str, split: str = "validation", line: str | None = None) -> np.ndarray:
        return np.array([r.percentile for r in self.select(model, split, line)])

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCORE_COLUMNS)
            for r in self.rows:
                w.writerow(
                    (r.line, r.triangle_id, r.model, r.split, r.accident_year, repr(r.lpd), repr(r.rmse), repr(r.percentile))
                )

    @classmethod
    def from_csv(cls, path: str | Path) -> "ScoreTable":
        rows = []
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for d in csv.DictReader(fh):
                ay = d["accident_year"]
                rows.append(
                    ScoreRow(
                        d["line"], d["triangle_id"], d["model"], d["split"],
                        int(ay) if ay.lstrip("-").isdigit() else ay,
                        float(d["lpd"]), float(d["rmse"]), float(d["percentile"]),
                    )
                )
        return cls(rows)


@dataclass(frozen=True)
class ElpdComparison:
    model_a: str
    model_b: str
    split: str
    elpd_a: float
    elpd_b: float
    diff: float
    se: float
    n: int


def elpd_and_diff(scores: ScoreTable, a: str, b: str, split: str = "validation", line: str | None = None) -> ElpdComparison:
    """Summed pointwise difference ``a - b`` and its standard error ``sqrt(n var(d))``."""
    pa = scores.pointwise(a, split, line)
    pb = scores.pointwise(b, split, line)
    if set(pa) != set(pb):
        raise BacktestError(f"{a} and {b} were scored on different {split} targets")
    keys = list(pa)
    d = np.array([pa[k] - pb[k] for k in keys])
    n = d.size
    se = float(np.sqrt(n * np.var(d, ddof=1))) if n > 1 else 0.0
    return ElpdComparison(a, b, split, float(sum(pa.values())), float(sum(pb.values())), float(d.sum()), se, n)


def pairwise_comparisons(scores: ScoreTable, split: str = "validation") -> list[dict]:
    out = []
    models = scores.models
    for line in [None] + scores.lines:
        for i, a in enumerate(models):
            for b in models[i + 1 :]:
                c = asdict(elpd_and_diff(scores, a, b, split, line))
                c["line"] = line or "all"
                out.append(c)
    return out


def calibration_bands(scores: ScoreTable, split: str = "validation", bins: int = 20, level: float = 0.99) -> dict:
    """Percentile histograms per model with their uniform-band violations."""
    out = {}
    for m in scores.models:
        pct = scores.percentiles(m, split)
        counts = rank_histogram(pct, 1.0, bins, continuous=True)
        # the band is undefined with fewer targets than bins
        viol = band_violations(counts, level) if pct.size >= bins else None
        out[m] = {"counts": counts.tolist(), "violations": viol}
    return out


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class LineConfig:
    tau: int
    rho: tuple[int, int]

    def dev_config(self, n_dev_lags: int, prior_scale: float) -> DevConfig:
        tau = min(self.tau, n_dev_lags)
        r2 = min(self.rho[1], n_dev_lags)
        r1 = min(self.rho[0], r2 - 1)
        return DevConfig(tau=tau, rho=(r1, r2), ultimate_lag=n_dev_lags, prior_scale=prior_scale)


DEFAULT_LINES = {
    "PP": LineConfig(4, (5, 10)),
    "CA": LineConfig(4, (5, 10)),
    "WC": LineConfig(6, (4, 10)),
    "OO": LineConfig(6, (4, 10)),
}
FALLBACK_LINE = LineConfig(4, (5, 10))


@dataclass(frozen=True)
class BacktestConfig:
    models: tuple[str, ...] = ("rw", "mr")
    prior_scale: float = 1.0
    dev_sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(warmup=500, draws=250))
    forecast_sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(warmup=1000, draws=500))
    lines: dict = field(default_factory=lambda: dict(DEFAULT_LINES))
    test_rows: tuple[int, ...] | None = None
    me_prior: str | tuple[float, float] | None = "auto"
    hierarchical: bool = True
    max_failure_fraction: float = 0.25
    seed: int = 0

    def line_config(self, line: str) -> LineConfig:
        return self.lines.get(line, FALLBACK_LINE)


@dataclass
class BacktestResult:
    scores: ScoreTable
    splits: dict[str, BacktestSplit]
    ultimates: dict[str, UltimateSummary]
    dev_draws: dict[str, tuple[DrawMatrix, DrawMatrix]]
    forecast_draws: dict[tuple[str, str], DrawMatrix]
    predictive: dict[tuple[str, str], np.ndarray]
    me_priors: dict[str, tuple[float, float] | None]
    failures: dict[str, str]
    diagnostics: list[dict]


def _me_prior(cfg: BacktestConfig, splits: Sequence[BacktestSplit]):
    if cfg.me_prior is None:
        return None
    if cfg.me_prior == "auto":
        r = np.array([s.observed_ratio for s in splits])
        if r.size < 2:
            return None
        return float(r.mean()), float(r.std(ddof=1))
    e, sd = cfg.me_prior
    return float(e), float(sd)


def run_backtest(corpus: Iterable[Triangle], cfg: BacktestConfig | None = None) -> BacktestResult:
    cfg = cfg or BacktestConfig()
    groups = group_by_line(corpus)
    for line, ts in groups.items():
        if len(ts) < 2:
            raise BacktestError(f"line {line}: backtest needs at least two triangles, got {len(ts)}")
    failures: dict[str, str] = {}
    splits: dict[str, BacktestSplit] = {}
    dev_cfgs: dict[str, DevConfig] = {}
    for line, ts in groups.items():
        for t in ts:
            try:
                s = make_split(t, cfg.test_rows)
                dc = cfg.line_config(line).dev_config(t.n_dev_lags, cfg.prior_scale)
                _prepare_dev([s.train], [dc])
            except (BacktestError, DevelopmentError) as exc:
                failures[t.id] = str(exc)
                continue
            splits[t.id] = s
            dev_cfgs[t.id] = dc

    ids = list(splits)
    fits = fit_development([splits[i].train for i in ids], [dev_cfgs[i] for i in ids], cfg.dev_sampler) if ids else []
    ultimates: dict[str, UltimateSummary] = {}
    dev_draws: dict[str, tuple[DrawMatrix, DrawMatrix]] = {}
    diagnostics = []
    for k, (tid, (body, tail)) in enumerate(zip(ids, fits)):
        rng = np.random.default_rng([cfg.seed, 1, k])
        s = splits[tid]
        try:
            ultimates[tid] = simulate_development(body, tail, s.train, dev_cfgs[tid], rng)
        except DevelopmentError as exc:
            failures[tid] = str(exc)
            continue
        dev_draws[tid] = (body, tail)
        diagnostics.append(
            {
                "triangle_id": tid,
                "stage": "development",
                "max_rhat_body": max_rhat(body),
                "max_rhat_tail": max_rhat(tail),
                "divergences": body.divergences + tail.divergences,
            }
        )

    lines: dict[str, list[str]] = {}
    me_priors: dict[str, tuple[float, float] | None] = {}
    for line, ts in groups.items():
        good = [t.id for t in ts if t.id in ultimates]
        if len(ts) - len(good) > cfg.max_failure_fraction * len(ts):
            failures[f"line:{line}"] = f"{len(ts) - len(good)} of {len(ts)} triangles failed"
            logger.error("line %s aborted: %s", line, failures[f"line:{line}"])
            continue
        if cfg.hierarchical and len(good) < 2:
            failures[f"line:{line}"] = "fewer than two usable triangles"
            continue
        lines[line] = good
        me_priors[line] = _me_prior(cfg, [splits[i] for i in good])
    if not lines:
        raise BacktestError("every line failed; nothing to score")

    def program(tid: str, line: str) -> Program:
        s = splits[tid]
        u = ultimates[tid]
        n_fit = s.validation_row
        prior = me_priors[line]
        me = MeasurementErrorInput(u.mean[:n_fit], u.sd[:n_fit], *(prior if prior else (None, None)))
        return Program(tid, me, s.full.premiums[:n_fit])

    scores = ScoreTable()
    forecast_draws: dict[tuple[str, str], DrawMatrix] = {}
    predictive: dict[tuple[str, str], np.ndarray] = {}
    line_names = list(lines)
    for m_idx, kind in enumerate(cfg.models):
        sampler = _reseed(cfg.forecast_sampler, cfg.seed, 2 + m_idx)
        per_program: dict[str, DrawMatrix] = {}
        if cfg.hierarchical:
            groups_p = [[program(tid, line) for tid in lines[line]] for line in line_names]
            fits_h = fit_hierarchical(groups_p, HierarchicalConfig(kind=kind, prior_scale=cfg.prior_scale), sampler)
            for line, fh, progs in zip(line_names, fits_h, groups_p):
                forecast_draws[(kind, line)] = fh
                diagnostics.append(
                    {
                        "line": line,
                        "model": kind,
                        "stage": "forecast",
                        "max_rhat": max_rhat(fh, [q for q in fh.draws if q not in ("eta", "r_true")]),
                        "divergences": fh.divergences,
                    }
                )
                for g, p in enumerate(progs):
                    per_program[p.id] = program_draws(fh, g)
        else:
            progs = [program(tid, line) for line in line_names for tid in lines[line]]
            for p, dm in zip(progs, fit_forecast(progs, kind, cfg.prior_scale, sampler=sampler)):
                per_program[p.id] = dm
                forecast_draws[(kind, p.id)] = dm

        for line in line_names:
            for tid in lines[line]:
                s = splits[tid]
                pd = per_program[tid]
                rng = np.random.default_rng([cfg.seed, 3, m_idx, ids.index(tid)])
                prem = s.full.premiums
                truth = s.ultimates / prem
                insample = posterior_predictive(pd, prem[: s.validation_row], rng)
                ahead = forecast(pd, 1, prem[s.validation_row : s.validation_row + 1], rng).loss_ratio
                pred = np.concatenate([insample, ahead], axis=1)
                predictive[(kind, tid)] = pred
                for split, rows in (("test", s.test_rows), ("validation", (s.validation_row,))):
                    for i in rows:
                        logp = log_predictive_density(pd, i, truth[i], prem[i])
                        scores.rows.append(
                            ScoreRow(
                                line=line,
                                triangle_id=tid,
                                model=kind,
                                split=split,
                                accident_year=s.full.accident_years[i],
                                lpd=lpd(logp),
                                rmse=rmse(s.ultimates[i], pred[:, i] * prem[i]),
                                percentile=percentile(truth[i], pred[:, i]),
                            )
                        )
    return BacktestResult(
        scores=scores,
        splits=splits,
        ultimates=ultimates,
        dev_draws=dev_draws,
        forecast_draws=forecast_draws,
        predictive=predictive,
        me_priors=me_priors,
        failures=failures,
        diagnostics=diagnostics,
    )


def _reseed(sampler: SamplerConfig, seed: int, stream: int) -> SamplerConfig:
    derived = int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])
    return replace(sampler, seed=derived)
