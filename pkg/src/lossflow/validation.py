"""Simulation-based calibration, uniformity bands and predictive checks."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import binom

from .development import (
    BondyModel,
    BondyParams,
    ChainLadderModel,
    ChainLadderParams,
    DevConfig,
    _flat_params,
    sample_dev_prior,
    simulate_paths,
)
from .forecasting import (
    ForecastPriors,
    MeasurementErrorInput,
    Program,
    StateSpaceModel,
    _core,
    _expit,
    _prepare as _prepare_ss,
    observation_sd,
    sample_forecast_prior,
)
from .inference import DrawMatrix, SamplerConfig, max_rhat, sample_batch, thin
from .triangle import Triangle, to_runoff

logger = logging.getLogger(__name__)


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ranks and bands


def rank_statistic(true_value: float, samples, rng: np.random.Generator | None = None) -> int:
    """Number of samples below ``true_value``; each tie counts with probability 1/2."""
    s = np.asarray(samples, dtype=float).reshape(-1)
    if s.size == 0:
        raise ValidationError("samples must be nonempty")
    below = int(np.sum(s < true_value))
    ties = int(np.sum(s == true_value))
    if ties:
        rng = rng or np.random.default_rng(0)
        below += int(rng.binomial(ties, 0.5))
    return below


def _bin_edges(max_rank: int, bins: int) -> np.ndarray:
    """Bin index for each rank ``0..max_rank``."""
    return (np.arange(max_rank + 1) * bins) // (max_rank + 1)


def bin_probabilities(max_rank: int, bins: int) -> np.ndarray:
    """Probability of each bin when ranks are uniform on ``0..max_rank``."""
    return np.bincount(_bin_edges(max_rank, bins), minlength=bins) / (max_rank + 1)


def rank_histogram(values, max_rank: int | float, bins: int = 20, continuous: bool = False) -> np.ndarray:
    """Counts per bin; integer ranks ``0..max_rank`` or, with ``continuous``, values in [0, 1]."""
    v = np.asarray(values)
    if continuous:
        idx = np.minimum((v * bins).astype(int), bins - 1)
    else:
        idx = _bin_edges(int(max_rank), bins)[v.astype(int)]
    return np.bincount(idx, minlength=bins)


def uniform_band(n: int, bins: int, level: float = 0.99, probs=None) -> tuple[np.ndarray, np.ndarray] | tuple[int, int]:
    """Central binomial interval for each bin count under uniformity.

    Equal bins give scalar ``(lo, hi)``; unequal ``probs`` give arrays.
    """
    if bins < 2:
        raise ValidationError("need at least two bins")
    if n < bins:
        raise ValidationError("need at least as many simulations as bins")
    tail = (1.0 - level) / 2.0
    p = np.full(bins, 1.0 / bins) if probs is None else np.asarray(probs, dtype=float)
    lo = binom.ppf(tail, n, p).astype(int)
    hi = binom.ppf(1.0 - tail, n, p).astype(int)
    if probs is None:
        return int(lo[0]), int(hi[0])
    return lo, hi


def band_violations(counts, level: float = 0.99, probs=None) -> int:
    counts = np.asarray(counts)
    n = int(counts.sum())
    bins = counts.size
    if probs is None:
        lo, hi = uniform_band(n, bins, level)
    else:
        lo, hi = uniform_band(n, bins, level, probs)
    return int(np.sum((counts < lo) | (counts > hi)))


# ---------------------------------------------------------------------------
# simulation-based calibration


@dataclass(frozen=True)
class SbcConfig:
    family: str = "dev"
    n_sims: int = 1000
    n_accident_years: int = 10
    n_dev_lags: int = 10
    dev: DevConfig = field(default_factory=lambda: DevConfig(tau=5, rho=(6, 10)))
    forecast_kind: str = "rw"
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(chains=4, warmup=1000, draws=1000))
    thin: int = 10
    bins: int = 20
    level: float = 0.99
    rhat_limit: float = 1.05
    divergence_limit: float = 0.05
    fit_sigma_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in ("dev", "forecast"):
            raise ValidationError(f"unknown SBC family {self.family!r}")
        if self.n_sims < 50:
            raise ValidationError("SBC needs at least 50 simulations")


@dataclass
class SbcReport:
    quantities: list[str]
    ranks: dict[str, np.ndarray]
    histograms: dict[str, np.ndarray]
    violations: dict[str, int]
    max_rank: int
    bins: int
    level: float
    n_sims: int
    retained: list[int]
    excluded: list[int]
    convergence: list[dict]

    @property
    def n_retained(self) -> int:
        return len(self.retained)

    @property
    def excluded_fraction(self) -> float:
        return len(self.excluded) / self.n_sims

    @property
    def unreliable(self) -> bool:
        return self.excluded_fraction > 0.20

    def fraction_within(self, max_violations: int = 1) -> float:
        return float(np.mean([self.violations[q] <= max_violations for q in self.quantities]))

    @property
    def max_violations(self) -> int:
        return max(self.violations.values())

    def band(self):
        """Per-bin ``(lo, hi)``; NaN when fewer simulations than bins were retained."""
        if self.n_retained < self.bins:
            nan = np.full(self.bins, np.nan)
            return nan, nan.copy()
        return uniform_band(self.n_retained, self.bins, self.level, bin_probabilities(self.max_rank, self.bins))

    def to_json(self) -> dict:
        lo, hi = self.band()
        return {
            "n_sims": self.n_sims,
            "n_retained": self.n_retained,
            "excluded": self.excluded,
            "excluded_fraction": self.excluded_fraction,
            "unreliable": self.unreliable,
            "max_rank": self.max_rank,
            "bins": self.bins,
            "level": self.level,
            "band_lo": None if np.isnan(lo).any() else lo.tolist(),
            "band_hi": None if np.isnan(hi).any() else hi.tolist(),
            "fraction_within_one_violation": self.fraction_within(1),
            "quantities": {
                q: {"histogram": self.histograms[q].tolist(), "violations": self.violations[q]} for q in self.quantities
            },
            "convergence": self.convergence,
        }

    def write(self, directory: str | Path) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        jp = d / "sbc_report.json"
        jp.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        cp = d / "sbc_ranks.csv"
        with cp.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("quantity", "simulation", "rank"))
            for q in self.quantities:
                for sim, r in zip(self.retained, self.ranks[q].tolist()):
                    w.writerow((q, sim, r))
        return [jp, cp]


def _dev_truth(body: ChainLadderParams, tail: BondyParams, k: int) -> dict:
    return {
        "log_alpha": body.log_alpha[k],
        "gamma1": body.gamma1[k],
        "gamma2": body.gamma2[k],
        "log_omega": tail.log_omega[k],
        "logit_beta": tail.logit_beta[k],
        "lambda1": tail.lambda1[k],
        "lambda2": tail.lambda2[k],
    }


def _simulate_dev_datasets(cfg: SbcConfig, rng: np.random.Generator):
    n, m = cfg.n_accident_years, cfg.n_dev_lags
    body, tail = sample_dev_prior(cfg.dev, rng, m, size=cfg.n_sims)
    sim_cfg = replace(cfg.dev, loss_scale=1.0, sigma_scale=1.0)
    fulls = []
    for k in range(cfg.n_sims):
        first = np.full((n, m), np.nan)
        first[:, 0] = np.exp(rng.normal(np.log(0.5), 0.5, size=n))
        t0 = Triangle(f"sbc{k:04d}", "SIM", first, np.ones(n))
        truth = {key: np.atleast_1d(v)[None, ...] for key, v in _dev_truth(body, tail, k).items()}
        with np.errstate(all="ignore"):
            try:
                paths = simulate_paths(truth, t0, sim_cfg, rng, until=m)[0]
            except ValueError:
                paths = None
        fulls.append(paths)
    return body, tail, fulls


def _run_dev_sbc(cfg: SbcConfig, rng: np.random.Generator) -> SbcReport:
    n, m = cfg.n_accident_years, cfg.n_dev_lags
    body, tail, fulls = _simulate_dev_datasets(cfg, rng)
    fit_cfg = replace(cfg.dev, loss_scale=1.0, sigma_scale=cfg.fit_sigma_scale)
    usable = [k for k, f in enumerate(fulls) if f is not None and np.all(np.isfinite(f)) and np.all(f > 0)]
    trains = [to_runoff(Triangle(f"sbc{k:04d}", "SIM", fulls[k], np.ones(n))) for k in usable]
    cfgs = [fit_cfg] * len(trains)
    body_model = ChainLadderModel(trains, cfgs)
    tail_model = BondyModel(trains, cfgs)
    body_fits = sample_batch(body_model, cfg.sampler)
    tail_fits = sample_batch(tail_model, replace(cfg.sampler, seed=cfg.sampler.seed + 1))

    heldout_rows = list(range(1, n))  # 0-based rows whose last lag is unobserved
    names = [f"log_alpha[{j}]" for j in range(m - 1)]
    names += ["gamma1", "gamma2", "log_omega", "logit_beta", "lambda1", "lambda2"]
    names += [f"y[{i + 1},{m}]" for i in heldout_rows]
    names += ["loglik_body", "loglik_tail"]
    ranks: dict[str, list[int]] = {q: [] for q in names}
    retained, excluded, convergence = [], [k for k in range(cfg.n_sims) if k not in usable], []
    for pos, k in enumerate(usable):
        b, tl = body_fits[pos], tail_fits[pos]
        worst = max(max_rhat(b), max_rhat(tl))
        div = max(b.divergence_fraction, tl.divergence_fraction)
        convergence.append({"simulation": k, "max_rhat": worst, "divergence_fraction": div})
        if not (worst <= cfg.rhat_limit and div <= cfg.divergence_limit):
            excluded.append(k)
            continue
        retained.append(k)
        bt, tt = thin(b, cfg.thin), thin(tl, cfg.thin)
        truth = _dev_truth(body, tail, k)
        srng = np.random.default_rng([cfg.seed, 11, k])
        for j in range(m - 1):
            ranks[f"log_alpha[{j}]"].append(rank_statistic(truth["log_alpha"][j], bt.flat("log_alpha")[:, j], srng))
        for q in ("gamma1", "gamma2"):
            ranks[q].append(rank_statistic(truth[q], bt.flat(q), srng))
        for q in ("log_omega", "logit_beta", "lambda1", "lambda2"):
            ranks[q].append(rank_statistic(truth[q], tt.flat(q), srng))
        params = _flat_params(bt, tt)
        pred = simulate_paths(params, trains[pos], fit_cfg, srng, until=m)
        for i in heldout_rows:
            ranks[f"y[{i + 1},{m}]"].append(rank_statistic(fulls[k][i, m - 1], pred[:, i, m - 1], srng))
        one = np.array([pos])
        bm, tm = body_model.take(one), tail_model.take(one)
        for q, model, draws in (("loglik_body", bm, bt), ("loglik_tail", tm, tt)):
            vals = {p.name: draws.flat(p.name) for p in model.space}
            true_vals = {p.name: np.atleast_1d(np.asarray(truth[p.name], dtype=float))[None, ...] for p in model.space}
            ll_draws = model.take(np.zeros(draws.n_draws, dtype=int)).log_likelihood(_squeeze(vals))
            ll_true = model.log_likelihood(_squeeze(true_vals))[0]
            ranks[q].append(rank_statistic(ll_true, ll_draws, srng))
    max_rank = cfg.sampler.chains * (cfg.sampler.draws // cfg.thin)
    return _assemble(names, ranks, max_rank, cfg, retained, excluded, convergence)


def _squeeze(values: dict) -> dict:
    out = {}
    for k, v in values.items():
        v = np.asarray(v, dtype=float)
        out[k] = v.reshape(v.shape[0]) if v.ndim == 2 and v.shape[1] == 1 else v
    return out


def _assemble(names, ranks, max_rank, cfg, retained, excluded, convergence) -> SbcReport:
    probs = bin_probabilities(max_rank, cfg.bins)
    arrs = {q: np.asarray(ranks[q], dtype=int) for q in names}
    hists = {q: rank_histogram(arrs[q], max_rank, cfg.bins) for q in names}
    viol = {}
    for q in names:
        viol[q] = band_violations(hists[q], cfg.level, probs) if hists[q].sum() >= cfg.bins else cfg.bins
    report = SbcReport(
        quantities=list(names),
        ranks=arrs,
        histograms=hists,
        violations=viol,
        max_rank=max_rank,
        bins=cfg.bins,
        level=cfg.level,
        n_sims=cfg.n_sims,
        retained=retained,
        excluded=sorted(excluded),
        convergence=convergence,
    )
    if report.unreliable:
        logger.warning("SBC unreliable: %.0f%% of simulations excluded", 100 * report.excluded_fraction)
    return report


def _run_forecast_sbc(cfg: SbcConfig, rng: np.random.Generator) -> SbcReport:
    """Forecast-family SBC with exactly observed ultimates (measurement SD at its floor)."""
    n = cfg.n_accident_years
    kind = cfg.forecast_kind
    premiums = 1.0e4 * 1.03 ** np.arange(n)
    truths, programs = [], []
    for k in range(cfg.n_sims):
        p = sample_forecast_prior(kind, n, rng, cfg.dev.prior_scale)
        sig = observation_sd(p.fc_gamma, premiums)
        r = np.exp(p.eta + sig * rng.standard_normal(n))
        p.r_true = r
        truths.append(p)
        programs.append(Program(f"sbc{k:04d}", MeasurementErrorInput(r, np.zeros(n)), premiums))
    model = StateSpaceModel(programs, kind, cfg.dev.prior_scale)
    fits = sample_batch(model, cfg.sampler)
    names = ["eta0", "log_eps", "fc_gamma[0]", "fc_gamma[1]"]
    if kind == "mr":
        names += ["mu", "logit_phi"]
    names += [f"eta[{i}]" for i in range(n)] + ["ratio_next", "loglik"]
    ranks: dict[str, list[int]] = {q: [] for q in names}
    retained, excluded, convergence = [], [], []
    for k, fit in enumerate(fits):
        worst = max_rhat(fit, [q for q in fit.params])
        div = fit.divergence_fraction
        convergence.append({"simulation": k, "max_rhat": worst, "divergence_fraction": div})
        if not (worst <= cfg.rhat_limit and div <= cfg.divergence_limit):
            excluded.append(k)
            continue
        retained.append(k)
        ft = thin(fit, cfg.thin)
        truth = truths[k]
        srng = np.random.default_rng([cfg.seed, 12, k])
        scalar = {"eta0": truth.eta0, "log_eps": truth.log_eps, "fc_gamma[0]": truth.fc_gamma[0], "fc_gamma[1]": truth.fc_gamma[1]}
        if kind == "mr":
            scalar.update(mu=truth.mu, logit_phi=truth.logit_phi)
        for q, v in scalar.items():
            ranks[q].append(rank_statistic(v, ft.quantity(q).reshape(-1), srng))
        eta = ft.flat("eta")
        for i in range(n):
            ranks[f"eta[{i}]"].append(rank_statistic(truth.eta[i], eta[:, i], srng))
        phi = _expit(ft.flat("logit_phi")) if kind == "mr" else 1.0
        mu = ft.flat("mu") if kind == "mr" else 0.0
        true_phi = float(_expit(truth.logit_phi)) if kind == "mr" else 1.0
        true_mu = truth.mu if kind == "mr" else 0.0
        p_next = premiums[-1] * 1.03
        nxt_true = true_mu * (1 - true_phi) + true_phi * truth.eta[-1] + np.exp(truth.log_eps) * srng.standard_normal()
        r_next = np.exp(nxt_true + observation_sd(truth.fc_gamma, [p_next])[0] * srng.standard_normal())
        lvl = mu * (1 - phi) + phi * eta[:, -1] + np.exp(ft.flat("log_eps")) * srng.standard_normal(eta.shape[0])
        sig = observation_sd(ft.flat("fc_gamma"), np.array([[p_next]]))[:, 0]
        ranks["ratio_next"].append(rank_statistic(r_next, np.exp(lvl + sig * srng.standard_normal(eta.shape[0])), srng))
        ranks["loglik"].append(_forecast_loglik_rank(truth, ft, programs[k], kind, srng))
    max_rank = cfg.sampler.chains * (cfg.sampler.draws // cfg.thin)
    return _assemble(names, ranks, max_rank, cfg, retained, excluded, convergence)


def _forecast_loglik_rank(truth, ft: DrawMatrix, program: Program, kind: str, rng) -> int:
    data = _prepare_ss([[program]], [1.0])
    s = ft.n_draws

    def values(eta, eta0, log_eps, gam, mu, phi, r):
        return {
            "eta": eta[:, None, :],
            "eta0": eta0[:, None],
            "log_eps": log_eps[:, None],
            "g1": gam[:, None, 0],
            "g2": gam[:, None, 1],
            "mu": mu[:, None],
            "phi": phi[:, None],
            "log_r": np.log(r)[:, None, :],
        }

    mu = ft.flat("mu").reshape(s) if kind == "mr" else np.zeros(s)
    phi = _expit(ft.flat("logit_phi").reshape(s)) if kind == "mr" else np.ones(s)
    draws = values(ft.flat("eta"), ft.flat("eta0").reshape(s), ft.flat("log_eps").reshape(s),
                   ft.flat("fc_gamma"), mu, phi, ft.flat("r_true"))
    tmu = np.array([truth.mu if kind == "mr" else 0.0])
    tphi = np.array([float(_expit(truth.logit_phi)) if kind == "mr" else 1.0])
    true = values(truth.eta[None], np.array([truth.eta0]), np.array([truth.log_eps]),
                  np.asarray(truth.fc_gamma)[None], tmu, tphi, truth.r_true[None])
    ll = _core(draws, data.take(np.zeros(s, dtype=int)))[0]
    ll_true = _core(true, data)[0][0]
    return rank_statistic(ll_true, ll, rng)


def run_sbc(cfg: SbcConfig, rng: np.random.Generator | None = None) -> SbcReport:
    """Fit the model to datasets simulated from its prior and rank the truth among thinned draws."""
    if cfg.sampler.draws // cfg.thin < 1:
        raise ValidationError("thinning stride exceeds draws per chain")
    rng = rng or np.random.default_rng(cfg.seed)
    if cfg.family == "dev":
        return _run_dev_sbc(cfg, rng)
    return _run_forecast_sbc(cfg, rng)


# ---------------------------------------------------------------------------
# predictive checks


@dataclass
class PredictiveCheck:
    triangle_id: str
    mode: str
    trajectories: np.ndarray  # (k, N, M)
    lower: dict[float, np.ndarray]
    upper: dict[float, np.ndarray]
    coverage: dict[float, float]
    n_cells: int
    observed: np.ndarray

    def overlay_rows(self):
        k, n, m = self.trajectories.shape
        for r in range(k):
            for i in range(n):
                for j in range(m):
                    yield (self.triangle_id, self.mode, r, i + 1, j + 1, repr(float(self.trajectories[r, i, j])))

    def interval_rows(self):
        n, m = self.observed.shape
        levels = sorted(self.lower)
        for i in range(n):
            for j in range(m):
                row = [self.triangle_id, i + 1, j + 1, repr(float(self.observed[i, j]))]
                for lv in levels:
                    row += [repr(float(self.lower[lv][i, j])), repr(float(self.upper[lv][i, j]))]
                yield tuple(row)

    def write(self, directory: str | Path) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tp = d / f"trajectories_{self.triangle_id}_{self.mode}.csv"
        with tp.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("triangle_id", "mode", "realization", "accident_year", "dev_lag", "loss"))
            w.writerows(self.overlay_rows())
        ip = d / f"intervals_{self.triangle_id}_{self.mode}.csv"
        levels = sorted(self.lower)
        with ip.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["triangle_id", "accident_year", "dev_lag", "observed"]
            for lv in levels:
                head += [f"lo{int(round(lv * 100))}", f"hi{int(round(lv * 100))}"]
            w.writerow(head)
            w.writerows(self.interval_rows())
        return [tp, ip]


def predictive_check(
    t: Triangle,
    cfg: DevConfig,
    rng: np.random.Generator,
    mode: str = "posterior",
    draws: tuple[DrawMatrix, DrawMatrix] | None = None,
    n_prior: int = 1000,
    n_trajectories: int = 30,
    levels: Sequence[float] = (0.5, 0.9),
) -> PredictiveCheck:
    """Replicate the triangle from its first column and compare observed cells with predictive intervals.

    ``mode="prior"`` draws parameters from the priors and needs no fit.
    """
    n, m = t.losses.shape
    if mode == "posterior":
        if draws is None:
            raise ValidationError("posterior mode needs (body, tail) draws")
        params = _flat_params(*draws)
    elif mode == "prior":
        body, tail = sample_dev_prior(cfg, rng, m, size=n_prior)
        params = {
            "log_alpha": body.log_alpha,
            "gamma1": body.gamma1,
            "gamma2": body.gamma2,
            "log_omega": tail.log_omega,
            "logit_beta": tail.logit_beta,
            "lambda1": tail.lambda1,
            "lambda2": tail.lambda2,
        }
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    sim_cfg = replace(cfg, ultimate_lag=max(m, cfg.ultimate_lag or m))
    with np.errstate(all="ignore"):
        try:
            paths = simulate_paths(params, t, sim_cfg, rng, until=m, condition=False)
        except ValueError:
            if mode == "posterior":
                raise
            # heavy-tailed prior draws can overflow; keep the finite replicates
            paths = _finite_prior_paths(params, t, sim_cfg, rng, m)
    obs = t.observed
    lower, upper, coverage = {}, {}, {}
    check = obs.copy()
    check[:, 0] = False
    n_cells = int(check.sum())
    tol = 1e-12 * np.abs(np.nan_to_num(t.losses))
    for lv in levels:
        lo = np.quantile(paths, (1 - lv) / 2, axis=0)
        hi = np.quantile(paths, 1 - (1 - lv) / 2, axis=0)
        lower[lv], upper[lv] = lo, hi
        y = np.where(obs, t.losses, np.nan)
        inside = (y >= lo - tol) & (y <= hi + tol)
        coverage[lv] = float(inside[check].mean()) if n_cells else float("nan")
    k = min(n_trajectories, paths.shape[0])
    pick = rng.choice(paths.shape[0], size=k, replace=False)
    return PredictiveCheck(
        triangle_id=t.id,
        mode=mode,
        trajectories=paths[np.sort(pick)],
        lower=lower,
        upper=upper,
        coverage=coverage,
        n_cells=n_cells,
        observed=t.losses,
    )


def _finite_prior_paths(params, t, cfg, rng, m):
    keep = []
    s = params["gamma1"].shape[0]
    for a in range(s):
        one = {k: v[a : a + 1] for k, v in params.items()}
        try:
            keep.append(simulate_paths(one, t, cfg, rng, until=m, condition=False)[0])
        except ValueError:
            continue
    if not keep:
        raise ValidationError("every prior predictive path overflowed")
    return np.stack(keep)
