"""Loss-development models: chain-ladder body and generalised Bondy tail.

Both models share one likelihood form. For an observed cell ``(i, j)`` inside
the model's training window

    log y_ij ~ Normal(log(a_ij) + log y_i,j-1, s_ij)
    s_ij^2   = exp(c1 + c2 * j + log y_i,j-1)

where the body uses a free link ratio ``a_ij = alpha_{j-1}`` and the tail the
decaying ``a_ij = omega ** (beta ** j)``. The first column is conditioned on.

Losses are divided by ``DevConfig.loss_scale`` (default: the triangle's mean
premium) before modelling, so the variance model sees loss-ratio-sized values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .inference import DrawMatrix, LogDensityModel, Param, ParameterSpace, SamplerConfig, sample_batch
from .triangle import Triangle

LOG_2PI = float(np.log(2 * np.pi))
LOG_2 = float(np.log(2.0))

# (location, sd) before the prior scale multiplier is applied
BODY_PRIORS = {"log_alpha": (0.0, 1.0), "gamma1": (-3.0, 0.25), "gamma2": (-1.0, 0.1)}
TAIL_PRIORS = {"log_omega": (0.0, 1.0), "logit_beta": (-2.0, 0.5), "lambda1": (-3.0, 0.25), "lambda2": (-1.0, 0.1)}


class DevelopmentError(ValueError):
    pass


@dataclass(frozen=True)
class DevConfig:
    tau: int = 4
    rho: tuple[int, int] = (5, 10)
    ultimate_lag: int | None = None
    prior_scale: float = 1.0
    loss_scale: float | None = None
    sigma_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "rho", tuple(int(r) for r in self.rho))
        if self.tau < 2:
            raise DevelopmentError(f"tau={self.tau} must be >= 2")
        r1, r2 = self.rho
        if not 2 <= r1 < r2:
            raise DevelopmentError(f"rho={self.rho} needs 2 <= rho1 < rho2")
        if self.prior_scale <= 0 or self.sigma_scale <= 0:
            raise DevelopmentError("prior_scale and sigma_scale must be > 0")
        if self.loss_scale is not None and self.loss_scale <= 0:
            raise DevelopmentError("loss_scale must be > 0")

    def validate(self, n_dev_lags: int, training: bool = True) -> None:
        if self.tau > n_dev_lags:
            raise DevelopmentError(f"tau={self.tau} exceeds {n_dev_lags} development lags")
        if training and self.rho[1] > n_dev_lags:
            raise DevelopmentError(f"rho={self.rho} exceeds {n_dev_lags} development lags")
        if self.ultimate_lag is not None and self.ultimate_lag < n_dev_lags:
            raise DevelopmentError("ultimate_lag must be >= the number of development lags")

    def horizon(self, n_dev_lags: int) -> int:
        return self.ultimate_lag if self.ultimate_lag is not None else 4 * n_dev_lags

    def scale_for(self, t: Triangle) -> float:
        return float(self.loss_scale) if self.loss_scale is not None else float(np.mean(t.premiums))

    def prior_table(self) -> dict[str, dict[str, float]]:
        k = self.prior_scale
        table = {}
        for name, (loc, sd) in {**BODY_PRIORS, **TAIL_PRIORS}.items():
            table[name] = {"loc": loc, "sd": sd * k}
        table["log_omega"]["truncation"] = 0.0
        return table


@dataclass
class ChainLadderParams:
    log_alpha: np.ndarray
    gamma1: float
    gamma2: float


@dataclass
class BondyParams:
    log_omega: float
    logit_beta: float
    lambda1: float
    lambda2: float


@dataclass
class UltimateSummary:
    triangle_id: str
    accident_years: tuple
    mean: np.ndarray
    sd: np.ndarray
    draws: np.ndarray = field(repr=False)
    premiums: np.ndarray = field(repr=False)

    def rows(self):
        for k, ay in enumerate(self.accident_years):
            yield (self.triangle_id, ay, float(self.mean[k]), float(self.sd[k]))


ULTIMATE_COLUMNS = ("triangle_id", "accident_year", "mean_ultimate_lr", "sd_ultimate_lr")


def write_ultimates(path: str | Path, summaries: Sequence[UltimateSummary]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ULTIMATE_COLUMNS)
        for s in summaries:
            w.writerows((tid, ay, repr(m), repr(sd)) for tid, ay, m, sd in s.rows())


def write_ultimate_draws(path: str | Path, summaries: Sequence[UltimateSummary]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("triangle_id", "accident_year", "draw", "ultimate_lr"))
        for s in summaries:
            for k, ay in enumerate(s.accident_years):
                w.writerows((s.triangle_id, ay, d, repr(v)) for d, v in enumerate(s.draws[:, k].tolist()))


def read_ultimates(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, list]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            d = out.setdefault(row["triangle_id"], {"accident_year": [], "mean": [], "sd": []})
            d["accident_year"].append(row["accident_year"])
            d["mean"].append(float(row["mean_ultimate_lr"]))
            d["sd"].append(float(row["sd_ultimate_lr"]))
    return {k: {n: np.array(v) if n != "accident_year" else v for n, v in d.items()} for k, d in out.items()}


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class _DevData:
    """Stack of scaled triangles padded to a common (N, M) shape."""

    log_y: np.ndarray  # (D, N, M), 0 where unobserved
    body_mask: np.ndarray  # (D, N, M-1), target lag j = column + 2
    tail_mask: np.ndarray
    kappa: np.ndarray  # (D,)
    log_sigma_scale: np.ndarray  # (D,)

    def take(self, idx) -> "_DevData":
        return _DevData(*(getattr(self, f.name)[idx] for f in fields(self)))

    @property
    def n_lags(self) -> int:
        return self.log_y.shape[2]


def _prepare(triangles: Sequence[Triangle], cfgs: Sequence[DevConfig], require: str | None = None) -> _DevData:
    n = max(t.n_accident_years for t in triangles)
    m = max(t.n_dev_lags for t in triangles)
    d = len(triangles)
    log_y = np.zeros((d, n, m))
    body = np.zeros((d, n, m - 1), dtype=bool)
    tail = np.zeros((d, n, m - 1), dtype=bool)
    lags = np.arange(2, m + 1)
    for k, (t, c) in enumerate(zip(triangles, cfgs)):
        c.validate(t.n_dev_lags)
        obs = t.observed
        tn, tm = obs.shape
        log_y[k, :tn, :tm] = np.where(obs, np.log(np.where(obs, t.losses, 1.0) / c.scale_for(t)), 0.0)
        target = np.zeros((n, m - 1), dtype=bool)
        target[:tn, : tm - 1] = obs[:, 1:]
        body[k] = target & (lags <= c.tau)[None, :]
        lo = max(2, c.rho[0])
        tail[k] = target & ((lags >= lo) & (lags <= c.rho[1]))[None, :]
        if require in ("body", None) and not body[k].any():
            raise DevelopmentError(f"{t.id}: no observed cells in the body window 2..{c.tau}")
        if require in ("tail", None) and not tail[k].any():
            raise DevelopmentError(f"{t.id}: no observed cells in the tail window {lo}..{c.rho[1]}")
    return _DevData(
        log_y=log_y,
        body_mask=body,
        tail_mask=tail,
        kappa=np.array([c.prior_scale for c in cfgs], dtype=float),
        log_sigma_scale=np.log([c.sigma_scale for c in cfgs]),
    )


# ---------------------------------------------------------------------------
# densities


def _lognormal_cells(log_link, c1, c2, data: _DevData, mask):
    """Log-likelihood of window cells and its derivative wrt (mu, c1, c2).

    ``log_link`` broadcasts to (B, N, M-1).
    """
    prev = data.log_y[:, :, :-1]
    cur = data.log_y[:, :, 1:]
    j = np.arange(2, data.n_lags + 1, dtype=float)
    log_s2 = c1[:, None, None] + c2[:, None, None] * j + prev
    log_s = 0.5 * log_s2 + data.log_sigma_scale[:, None, None]
    inv_s = np.exp(-log_s)
    z = (cur - log_link - prev) * inv_s
    w = mask.astype(float)
    ll = np.sum(w * (-cur - log_s - 0.5 * LOG_2PI - 0.5 * z * z), axis=(1, 2))
    d_mu = w * z * inv_s
    d_logs2 = w * (0.5 * z * z - 0.5)
    return ll, d_mu, d_logs2, j


def _normal_prior(x, loc, sd):
    r = (x - loc) / sd
    return -0.5 * r * r - np.log(sd) - 0.5 * LOG_2PI, -r / sd


def body_log_density(values: dict, data: _DevData, with_prior: bool = True):
    la, g1, g2 = values["log_alpha"], values["gamma1"], values["gamma2"]
    ll, d_mu, d_s, j = _lognormal_cells(la[:, None, :], g1, g2, data, data.body_mask)
    grads = {
        "log_alpha": d_mu.sum(axis=1),
        "gamma1": d_s.sum(axis=(1, 2)),
        "gamma2": (d_s * j).sum(axis=(1, 2)),
    }
    if not with_prior:
        return ll, grads
    k = data.kappa
    lp = ll
    for name, (loc, sd) in BODY_PRIORS.items():
        sdk = sd * (k[:, None] if name == "log_alpha" else k)
        p, dp = _normal_prior(values[name], loc, sdk)
        lp = lp + (p.sum(axis=1) if name == "log_alpha" else p)
        grads[name] = grads[name] + dp
    return lp, grads


def tail_log_density(values: dict, data: _DevData, with_prior: bool = True):
    u, b, l1, l2 = values["log_omega"], values["logit_beta"], values["lambda1"], values["lambda2"]
    j = np.arange(2, data.n_lags + 1, dtype=float)
    log_beta = -np.logaddexp(0.0, -b)
    beta_j = np.exp(log_beta[:, None] * j)  # (B, M-1)
    log_link = u[:, None] * beta_j
    ll, d_mu, d_s, _ = _lognormal_cells(log_link[:, None, :], l1, l2, data, data.tail_mask)
    d_link = d_mu.sum(axis=1)
    one_minus_beta = np.exp(-np.logaddexp(0.0, b))
    grads = {
        "log_omega": np.sum(d_link * beta_j, axis=1),
        "logit_beta": np.sum(d_link * u[:, None] * j * beta_j, axis=1) * one_minus_beta,
        "lambda1": d_s.sum(axis=(1, 2)),
        "lambda2": (d_s * j).sum(axis=(1, 2)),
    }
    if not with_prior:
        return ll, grads
    lp = ll
    for name, (loc, sd) in TAIL_PRIORS.items():
        p, dp = _normal_prior(values[name], loc, sd * data.kappa)
        if name == "log_omega":
            p = p + LOG_2
        lp = lp + p
        grads[name] = grads[name] + dp
    return lp, grads


def _as_batch(p) -> dict:
    return {f.name: np.atleast_1d(np.asarray(getattr(p, f.name), dtype=float))[None, ...] for f in fields(p)}


def _single(params_cls, grads: dict):
    kw = {}
    for f in fields(params_cls):
        g = np.asarray(grads[f.name])[0]
        kw[f.name] = g if g.ndim else float(g)
    return params_cls(**kw)


def cl_log_density(p: ChainLadderParams, t: Triangle, cfg: DevConfig) -> tuple[float, ChainLadderParams]:
    """Chain-ladder log posterior (data term on window cells ``2 <= j <= tau``) and gradient."""
    data = _prepare([t], [cfg], require="body")
    values = _as_batch(p)
    values["gamma1"] = values["gamma1"][:, 0]
    values["gamma2"] = values["gamma2"][:, 0]
    if values["log_alpha"].shape[1] != t.n_dev_lags - 1:
        raise DevelopmentError(f"log_alpha must have {t.n_dev_lags - 1} elements")
    lp, grads = body_log_density(values, data)
    if not np.isfinite(lp[0]):
        raise DevelopmentError("non-finite chain-ladder density")
    return float(lp[0]), _single(ChainLadderParams, grads)


def bondy_log_density(p: BondyParams, t: Triangle, cfg: DevConfig) -> tuple[float, BondyParams]:
    """Generalised Bondy log posterior on the tail window ``[max(2, rho1), rho2]`` and gradient."""
    if p.log_omega < 0:
        raise DevelopmentError("log_omega must be >= 0")
    data = _prepare([t], [cfg], require="tail")
    values = {k: v[:, 0] for k, v in _as_batch(p).items()}
    lp, grads = tail_log_density(values, data)
    if not np.isfinite(lp[0]):
        raise DevelopmentError("non-finite Bondy density")
    return float(lp[0]), _single(BondyParams, grads)


def bondy_link_ratio(log_omega, logit_beta, j):
    """``omega ** (beta ** j)`` for the decaying tail link ratio into lag ``j``."""
    beta = 1.0 / (1.0 + np.exp(-np.asarray(logit_beta, dtype=float)))
    return np.exp(np.asarray(log_omega, dtype=float) * beta ** np.asarray(j, dtype=float))


# ---------------------------------------------------------------------------
# sampler-facing models


class ChainLadderModel(LogDensityModel):
    def __init__(self, triangles: Sequence[Triangle], cfgs: Sequence[DevConfig], _data: _DevData | None = None):
        self.data = _data if _data is not None else _prepare(triangles, cfgs, require="body")
        self.n_data = self.data.log_y.shape[0]
        self.space = ParameterSpace(
            [Param("log_alpha", (self.data.n_lags - 1,)), Param("gamma1"), Param("gamma2")]
        )
        self._kappa0 = float(self.data.kappa[0])

    def take(self, idx):
        return ChainLadderModel((), (), self.data.take(idx))

    def log_density(self, values):
        return body_log_density(values, self.data)

    def init_values(self, rng):
        body, _ = sample_dev_prior(DevConfig(prior_scale=self._kappa0), rng, self.data.n_lags)
        return {"log_alpha": body.log_alpha, "gamma1": body.gamma1, "gamma2": body.gamma2}

    def log_likelihood(self, values):
        return body_log_density(values, self.data, with_prior=False)[0]


class BondyModel(LogDensityModel):
    def __init__(self, triangles: Sequence[Triangle], cfgs: Sequence[DevConfig], _data: _DevData | None = None):
        self.data = _data if _data is not None else _prepare(triangles, cfgs, require="tail")
        self.n_data = self.data.log_y.shape[0]
        self.space = ParameterSpace(
            [Param("log_omega", kind="positive"), Param("logit_beta"), Param("lambda1"), Param("lambda2")]
        )
        self._kappa0 = float(self.data.kappa[0])

    def take(self, idx):
        return BondyModel((), (), self.data.take(idx))

    def log_density(self, values):
        return tail_log_density(values, self.data)

    def init_values(self, rng):
        _, tail = sample_dev_prior(DevConfig(prior_scale=self._kappa0), rng, self.data.n_lags)
        # the positive transform needs log_omega strictly above zero
        return {
            "log_omega": max(tail.log_omega, 1e-3),
            "logit_beta": tail.logit_beta,
            "lambda1": tail.lambda1,
            "lambda2": tail.lambda2,
        }

    def log_likelihood(self, values):
        return tail_log_density(values, self.data, with_prior=False)[0]


def sample_dev_prior(cfg: DevConfig, rng: np.random.Generator, n_dev_lags: int, size: int | None = None):
    """Independent prior draws for the body and tail parameters (prior scale applied)."""
    k = cfg.prior_scale
    shape = () if size is None else (size,)

    def normal(name, extra=()):
        loc, sd = {**BODY_PRIORS, **TAIL_PRIORS}[name]
        return rng.normal(loc, sd * k, size=shape + extra)

    body = ChainLadderParams(
        log_alpha=normal("log_alpha", (n_dev_lags - 1,)),
        gamma1=normal("gamma1"),
        gamma2=normal("gamma2"),
    )
    tail = BondyParams(
        log_omega=np.abs(normal("log_omega")),
        logit_beta=normal("logit_beta"),
        lambda1=normal("lambda1"),
        lambda2=normal("lambda2"),
    )
    if size is None:
        body.gamma1, body.gamma2 = float(body.gamma1), float(body.gamma2)
        tail = BondyParams(*(float(getattr(tail, f.name)) for f in fields(tail)))
    return body, tail


def fit_development(
    triangles: Sequence[Triangle],
    cfgs: Sequence[DevConfig] | DevConfig,
    sampler: SamplerConfig | None = None,
) -> list[tuple[DrawMatrix, DrawMatrix]]:
    """Fit body and tail models to every triangle, batched; returns ``(body, tail)`` per triangle."""
    if isinstance(cfgs, DevConfig):
        cfgs = [cfgs] * len(triangles)
    body = sample_batch(ChainLadderModel(triangles, cfgs), sampler)
    tail = sample_batch(BondyModel(triangles, cfgs), sampler)
    out = []
    for t, b, tl in zip(triangles, body, tail):
        b.draws["log_alpha"] = b.draws["log_alpha"][..., : t.n_dev_lags - 1]
        out.append((b, tl))
    return out


# ---------------------------------------------------------------------------
# forward simulation


def _flat_params(body: DrawMatrix, tail: DrawMatrix):
    if body.n_draws != tail.n_draws:
        raise DevelopmentError(f"body has {body.n_draws} draws but tail has {tail.n_draws}")
    return {
        "log_alpha": body.flat("log_alpha"),
        "gamma1": body.flat("gamma1"),
        "gamma2": body.flat("gamma2"),
        "log_omega": tail.flat("log_omega"),
        "logit_beta": tail.flat("logit_beta"),
        "lambda1": tail.flat("lambda1"),
        "lambda2": tail.flat("lambda2"),
    }


def _link_and_variance(params: dict, cfg: DevConfig, j: int):
    """Per-draw log link into lag ``j`` and variance coefficients, by prediction regime."""
    if j <= cfg.tau:
        return params["log_alpha"][:, j - 2], params["gamma1"], params["gamma2"]
    beta = 1.0 / (1.0 + np.exp(-params["logit_beta"]))
    return params["log_omega"] * beta**j, params["lambda1"], params["lambda2"]


def simulate_paths(
    params: dict,
    t: Triangle,
    cfg: DevConfig,
    rng: np.random.Generator,
    until: int | None = None,
    condition: bool = True,
) -> np.ndarray:
    """Forward-simulate cumulative losses ``(S, N, until)`` from the first column.

    Chain-ladder draws propagate lags ``2..tau`` and Bondy draws every later
    lag. With ``condition`` observed cells keep their observed values.
    """
    n, m = t.losses.shape
    until = until or cfg.horizon(m)
    scale = cfg.scale_for(t)
    s = params["gamma1"].shape[0]
    obs = t.observed
    y_obs = np.where(obs, t.losses, 1.0) / scale
    out = np.empty((s, n, until))
    cur = np.broadcast_to(y_obs[:, 0], (s, n)).copy()
    out[:, :, 0] = cur
    shift = float(np.log(cfg.sigma_scale))
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(2, until + 1):
            link, c1, c2 = _link_and_variance(params, cfg, j)
            log_prev = np.log(cur)
            log_s = 0.5 * (c1[:, None] + c2[:, None] * j + log_prev) + shift
            new = np.exp(link[:, None] + log_prev + np.exp(log_s) * rng.standard_normal((s, n)))
            if condition and j <= m:
                cur = np.where(obs[:, j - 1][None, :], y_obs[:, j - 1][None, :], new)
            else:
                cur = new
            out[:, :, j - 1] = cur
    bad = ~np.isfinite(out) | (out <= 0)
    if bad.any():
        draw = int(np.argwhere(bad)[0][0])
        raise DevelopmentError(f"{t.id}: forward simulation overflowed at draw {draw}")
    return out * scale


def simulate_development(
    body: DrawMatrix,
    tail: DrawMatrix,
    t: Triangle,
    cfg: DevConfig,
    rng: np.random.Generator,
) -> UltimateSummary:
    """Posterior predictive ultimate loss ratios, one path per paired body/tail draw."""
    cfg.validate(t.n_dev_lags, training=False)
    if not t.observed[:, 0].all():
        raise DevelopmentError(f"{t.id}: first development lag must be observed for every accident year")
    params = _flat_params(body, tail)
    paths = simulate_paths(params, t, cfg, rng)
    ult = paths[:, :, -1] / t.premiums[None, :]
    return UltimateSummary(
        triangle_id=t.id,
        accident_years=t.accident_years,
        mean=ult.mean(axis=0),
        sd=ult.std(axis=0, ddof=1) if ult.shape[0] > 1 else np.zeros(ult.shape[1]),
        draws=ult,
        premiums=t.premiums,
    )


def development_factors(body: DrawMatrix, tail: DrawMatrix, cfg: DevConfig, n_dev_lags: int) -> np.ndarray:
    """Per-draw age-to-age factors ``(S, M-1)``; column ``j-1`` links lag ``j`` to ``j+1``."""
    params = _flat_params(body, tail)
    cols = [np.exp(_link_and_variance(params, cfg, j)[0]) for j in range(2, n_dev_lags + 1)]
    return np.stack(cols, axis=1)
