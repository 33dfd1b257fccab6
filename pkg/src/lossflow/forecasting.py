"""State-space forecasters for ultimate loss ratios.

Two latent processes on the log loss ratio are supported:

* ``"rw"`` random walk, ``eta_i ~ Normal(eta_{i-1}, eps)``;
* ``"mr"`` mean reversion, ``eta_i ~ Normal(mu (1 - phi) + phi eta_{i-1}, eps)``.

Both observe the true ultimate loss ratio ``r'_i ~ Lognormal(eta_i, sigma_i)``
with ``sigma_i^2 = exp(g1)^2 + exp(g2)^2 / sqrt(p_i)``. The development model
output enters through a lognormal measurement model for its posterior mean
``m_i`` whose spread follows the posterior SD ``s_i``, and ``r'_i`` may carry
an empirical lognormal prior.

Samplers use a non-centred latent path ``eta_i = a + phi eta_{i-1} + eps z_i``
and sample ``log r'_i = log m_i + sigma_xi_i u_i``; the public densities are on
the natural scale.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .inference import DrawMatrix, LogDensityModel, Param, ParameterSpace, SamplerConfig, sample_batch, max_rhat

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))
KINDS = ("rw", "mr")
SD_FLOOR = 1e-8


class ForecastError(ValueError):
    pass


def lognormal_moment_match(mean, sd):
    """Lognormal ``(mu_log, sigma_log)`` with the given mean and SD."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(mean <= 0):
        raise ForecastError("mean must be > 0")
    if np.any(sd < 0):
        raise ForecastError("sd must be >= 0")
    var_log = np.log1p((sd / mean) ** 2)
    mu, sigma = np.log(mean) - 0.5 * var_log, np.sqrt(var_log)
    if mu.ndim == 0:
        return float(mu), float(sigma)
    return mu, sigma


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# data and parameter types


@dataclass
class RandomWalkParams:
    eta: np.ndarray
    eta0: float
    log_eps: float
    fc_gamma: np.ndarray
    r_true: np.ndarray


@dataclass
class MeanReversionParams(RandomWalkParams):
    mu: float = -1.0
    logit_phi: float = 0.0


@dataclass
class MeasurementErrorInput:
    """Development-model ultimates seen by the forecaster.

    ``prior_mean``/``prior_sd`` give the empirical lognormal prior on the true
    ratio; leave them ``None`` for the flat-prior variant.
    """

    mean: np.ndarray
    sd: np.ndarray
    prior_mean: float | None = None
    prior_sd: float | None = None

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        self.sd = np.asarray(self.sd, dtype=float)
        if self.mean.shape != self.sd.shape or self.mean.ndim != 1:
            raise ForecastError("mean and sd must be 1-D of equal length")
        if np.any(~(self.mean > 0)):
            raise ForecastError("observed mean ultimate loss ratios must be > 0")
        if np.any(~(self.sd >= 0)):
            raise ForecastError("observed SDs must be >= 0")
        if (self.prior_mean is None) != (self.prior_sd is None):
            raise ForecastError("prior_mean and prior_sd must be given together")
        if self.prior_mean is not None and not (self.prior_mean > 0 and self.prior_sd > 0):
            raise ForecastError("prior_mean and prior_sd must be > 0")

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def floored_sd(self) -> np.ndarray:
        return np.maximum(self.sd, SD_FLOOR * self.mean)

    @property
    def sigma_xi(self) -> np.ndarray:
        return np.sqrt(np.log1p((self.floored_sd / self.mean) ** 2))

    def with_prior(self, mean: float | None, sd: float | None) -> "MeasurementErrorInput":
        return replace(self, prior_mean=mean, prior_sd=sd)


@dataclass
class Program:
    """One program's forecasting inputs."""

    id: str
    me: MeasurementErrorInput
    premiums: np.ndarray

    def __post_init__(self) -> None:
        self.premiums = np.asarray(self.premiums, dtype=float)
        if self.premiums.shape != (self.me.n,):
            raise ForecastError(f"{self.id}: {self.me.n} ultimates but {self.premiums.shape[0]} premiums")
        if np.any(~(self.premiums > 0)):
            raise ForecastError(f"{self.id}: premiums must be > 0")


@dataclass(frozen=True)
class ForecastPriors:
    """``(location, sd)`` of each non-hierarchical prior before the scale multiplier."""

    log_eps: tuple[float, float] = (-0.5, 1.0)
    eta0: tuple[float, float] = (0.0, 1.0)
    fc_gamma: tuple[float, float] = (-2.0, 1.0)
    mu: tuple[float, float] = (-1.0, 1.0)
    logit_phi: tuple[float, float] = (0.0, 1.0)

    def scaled(self, kappa: float) -> dict[str, tuple[float, float]]:
        return {f.name: (getattr(self, f.name)[0], getattr(self, f.name)[1] * kappa) for f in fields(self)}


@dataclass(frozen=True)
class HierarchicalConfig:
    kind: str = "rw"
    prior_scale: float = 1.0
    eps_mu: tuple[float, float] = (-2.0, 0.5)
    log_eps_sigma: tuple[float, float] = (-2.0, 0.5)
    eta_mu0: tuple[float, float] = (-1.0, 0.5)
    log_eta_sigma0: tuple[float, float] = (-2.0, 0.5)
    fc_gamma: tuple[float, float] = (-2.0, 1.0)
    # per-program mean-reversion parameters are not pooled
    mu: tuple[float, float] = (-1.0, 1.0)
    logit_phi: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ForecastError(f"unknown model kind {self.kind!r}")
        if self.prior_scale <= 0:
            raise ForecastError("prior_scale must be > 0")

    def scaled(self) -> dict[str, tuple[float, float]]:
        k = self.prior_scale
        names = ("eps_mu", "log_eps_sigma", "eta_mu0", "log_eta_sigma0", "fc_gamma", "mu", "logit_phi")
        return {n: (getattr(self, n)[0], getattr(self, n)[1] * k) for n in names}


# ---------------------------------------------------------------------------
# natural-scale density core


@dataclass
class _SSData:
    """Programs padded to ``(D, G, N)``; ``D`` datasets of ``G`` programs."""

    log_m: np.ndarray
    s2: np.ndarray
    sigma_xi: np.ndarray
    sqrt_p: np.ndarray
    mask: np.ndarray
    prior_mu: np.ndarray  # (D, G)
    prior_sigma: np.ndarray
    use_prior: np.ndarray
    program_mask: np.ndarray
    kappa: np.ndarray  # (D,)

    def take(self, idx) -> "_SSData":
        return _SSData(*(getattr(self, f.name)[idx] for f in fields(self)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.log_m.shape


def _prepare(groups: Sequence[Sequence[Program]], kappas: Sequence[float]) -> _SSData:
    d = len(groups)
    g = max(len(grp) for grp in groups)
    n = max(p.me.n for grp in groups for p in grp)
    arr = {k: np.ones((d, g, n)) for k in ("log_m", "s2", "sigma_xi", "sqrt_p")}
    arr["log_m"][:] = 0.0
    mask = np.zeros((d, g, n), dtype=bool)
    prior_mu = np.zeros((d, g))
    prior_sigma = np.ones((d, g))
    use_prior = np.zeros((d, g))
    pmask = np.zeros((d, g), dtype=bool)
    for a, grp in enumerate(groups):
        for b, p in enumerate(grp):
            k = p.me.n
            arr["log_m"][a, b, :k] = np.log(p.me.mean)
            arr["s2"][a, b, :k] = p.me.floored_sd**2
            arr["sigma_xi"][a, b, :k] = p.me.sigma_xi
            arr["sqrt_p"][a, b, :k] = np.sqrt(p.premiums)
            mask[a, b, :k] = True
            pmask[a, b] = True
            if p.me.prior_mean is not None:
                prior_mu[a, b], prior_sigma[a, b] = lognormal_moment_match(p.me.prior_mean, p.me.prior_sd)
                use_prior[a, b] = 1.0
    return _SSData(
        mask=mask,
        prior_mu=prior_mu,
        prior_sigma=prior_sigma,
        use_prior=use_prior,
        program_mask=pmask,
        kappa=np.asarray(kappas, dtype=float),
        **arr,
    )


def _core(v: dict, d: _SSData):
    """Latent transitions, observation, measurement and ``r'`` prior terms.

    Arrays are ``(B, G, N)`` / ``(B, G)``. Returns the log density ``(B,)`` and
    gradients with respect to eta, eta0, log_eps, g1, g2, mu, phi and log r'.
    """
    eta, eta0, log_eps = v["eta"], v["eta0"], v["log_eps"]
    g1, g2, mu, phi, lr = v["g1"], v["g2"], v["mu"], v["phi"], v["log_r"]
    w = d.mask.astype(float)
    eps = np.exp(log_eps)[..., None]
    phi_ = phi[..., None]
    mu_ = mu[..., None]
    prev = np.concatenate([eta0[..., None], eta[..., :-1]], axis=-1)
    tm = mu_ * (1.0 - phi_) + phi_ * prev
    e = (eta - tm) / eps
    lp = np.sum(w * (-0.5 * e * e - log_eps[..., None] - 0.5 * LOG_2PI), axis=(1, 2))
    de = w * e / eps
    g_eta = -de
    g_prev = de * phi_
    g_eta[..., :-1] += g_prev[..., 1:]
    grads = {
        "eta0": g_prev[..., 0],
        "log_eps": np.sum(w * (e * e - 1.0), axis=-1),
        "mu": np.sum(de, axis=-1) * (1.0 - phi),
        "phi": np.sum(de * (prev - mu_), axis=-1),
    }

    e1 = np.exp(2.0 * g1)[..., None]
    e2 = np.exp(2.0 * g2)[..., None] / d.sqrt_p
    s2 = e1 + e2
    res = lr - eta
    lp = lp + np.sum(w * (-lr - 0.5 * np.log(s2) - 0.5 * LOG_2PI - 0.5 * res * res / s2), axis=(1, 2))
    g_eta += w * res / s2
    q = w * (0.5 * res * res / (s2 * s2) - 0.5 / s2)
    grads["g1"] = np.sum(q * 2.0 * e1, axis=-1)
    grads["g2"] = np.sum(q * 2.0 * e2, axis=-1)
    g_lr = w * (-1.0 - res / s2)

    # log m - mu_xi written without cancelling log m against log r'
    offset = v["log_r_offset"] if "log_r_offset" in v else lr - d.log_m
    ratio = d.s2 * np.exp(-2.0 * lr)
    dev = 0.5 * np.log1p(ratio) - offset
    sx2 = d.sigma_xi**2
    lp = lp + np.sum(w * (-d.log_m - np.log(d.sigma_xi) - 0.5 * LOG_2PI - 0.5 * dev * dev / sx2), axis=(1, 2))
    g_lr += w * (dev / sx2) * (1.0 + ratio / (1.0 + ratio))

    wp = w * d.use_prior[..., None]
    ps = d.prior_sigma[..., None]
    rr = (lr - d.prior_mu[..., None]) / ps
    lp = lp + np.sum(wp * (-lr - np.log(ps) - 0.5 * LOG_2PI - 0.5 * rr * rr), axis=(1, 2))
    g_lr += wp * (-1.0 - rr / ps)

    grads["eta"] = g_eta
    grads["log_r"] = g_lr
    return lp, grads


def _normal(x, loc, sd):
    r = (x - loc) / sd
    return -0.5 * r * r - np.log(sd) - 0.5 * LOG_2PI, -r / sd


def _flat_priors(v: dict, pri: dict, kind: str, mask):
    """Independent priors of the non-hierarchical model, ``(B, G)`` arrays."""
    lp = 0.0
    grads = {}
    for name, key in (("log_eps", "log_eps"), ("eta0", "eta0"), ("g1", "fc_gamma"), ("g2", "fc_gamma")):
        p, dp = _normal(v[name], *pri[key])
        lp = lp + p
        grads[name] = dp
    if kind == "mr":
        for name in ("mu", "logit_phi"):
            p, dp = _normal(v[name], *pri[name])
            lp = lp + p
            grads[name] = dp
    return np.sum(lp * mask, axis=1), {k: g * mask for k, g in grads.items()}


def _single_program(p: RandomWalkParams, me: MeasurementErrorInput, premiums, kappa: float, kind: str):
    prog = Program("program", me, premiums)
    n = me.n
    for name in ("eta", "r_true"):
        if np.shape(getattr(p, name)) != (n,):
            raise ForecastError(f"{name} must have length {n}")
    if np.shape(p.fc_gamma) != (2,):
        raise ForecastError("fc_gamma must have length 2")
    r = np.asarray(p.r_true, dtype=float)
    if np.any(~(r > 0)):
        raise ForecastError("r_true must be > 0")
    data = _prepare([[prog]], [kappa])
    g = np.asarray(p.fc_gamma, dtype=float)
    v = {
        "eta": np.asarray(p.eta, dtype=float)[None, None],
        "eta0": np.array([[p.eta0]], dtype=float),
        "log_eps": np.array([[p.log_eps]], dtype=float),
        "g1": np.array([[g[0]]]),
        "g2": np.array([[g[1]]]),
        "log_r": np.log(r)[None, None],
    }
    if kind == "mr":
        v["mu"] = np.array([[p.mu]], dtype=float)
        v["logit_phi"] = np.array([[p.logit_phi]], dtype=float)
        v["phi"] = _expit(v["logit_phi"])
    else:
        v["mu"] = np.zeros((1, 1))
        v["phi"] = np.ones((1, 1))
    return v, data


def _public_density(p, me, premiums, kappa, priors, kind):
    priors = priors or ForecastPriors()
    v, data = _single_program(p, me, premiums, kappa, kind)
    lp, g = _core(v, data)
    plp, pg = _flat_priors(v, priors.scaled(kappa), kind, np.ones((1, 1)))
    lp = float((lp + plp)[0])
    if not np.isfinite(lp):
        raise ForecastError("non-finite forecast density")
    r = np.asarray(p.r_true, dtype=float)
    kw = dict(
        eta=g["eta"][0, 0],
        eta0=float(g["eta0"][0, 0] + pg["eta0"][0, 0]),
        log_eps=float(g["log_eps"][0, 0] + pg["log_eps"][0, 0]),
        fc_gamma=np.array([g["g1"][0, 0] + pg["g1"][0, 0], g["g2"][0, 0] + pg["g2"][0, 0]]),
        r_true=g["log_r"][0, 0] / r,
    )
    if kind == "rw":
        return lp, RandomWalkParams(**kw)
    phi = float(v["phi"][0, 0])
    kw["mu"] = float(g["mu"][0, 0] + pg["mu"][0, 0])
    kw["logit_phi"] = float(g["phi"][0, 0] * phi * (1.0 - phi) + pg["logit_phi"][0, 0])
    return lp, MeanReversionParams(**kw)


def rw_log_density(
    p: RandomWalkParams,
    me: MeasurementErrorInput,
    premiums,
    kappa: float = 1.0,
    priors: ForecastPriors | None = None,
) -> tuple[float, RandomWalkParams]:
    """Random-walk log posterior with measurement error; gradient on the natural scale."""
    return _public_density(p, me, premiums, kappa, priors, "rw")


def mr_log_density(
    p: MeanReversionParams,
    me: MeasurementErrorInput,
    premiums,
    kappa: float = 1.0,
    priors: ForecastPriors | None = None,
) -> tuple[float, MeanReversionParams]:
    """Mean-reversion log posterior with measurement error; gradient on the natural scale."""
    return _public_density(p, me, premiums, kappa, priors, "mr")


def observation_sd(fc_gamma, premiums) -> np.ndarray:
    g = np.asarray(fc_gamma, dtype=float)
    return np.sqrt(np.exp(2 * g[..., 0:1]) + np.exp(2 * g[..., 1:2]) / np.sqrt(np.asarray(premiums, dtype=float)))


# ---------------------------------------------------------------------------
# hierarchical density


def _hyper_terms(v: dict, cfg: dict, kind: str, pmask):
    """Group-level priors of the hierarchical model and the program-level links."""
    lp = 0.0
    g = {}
    for name, key in (("eps_mu", "eps_mu"), ("log_eps_sigma", "log_eps_sigma"),
                      ("eta_mu0", "eta_mu0"), ("log_eta_sigma0", "log_eta_sigma0")):
        p, dp = _normal(v[name], *cfg[key])
        lp = lp + p
        g[name] = dp
    w = pmask.astype(float)
    eps_sigma = np.exp(v["log_eps_sigma"])[:, None]
    eta_sigma = np.exp(v["log_eta_sigma0"])[:, None]
    a = (v["log_eps"] - v["eps_mu"][:, None]) / eps_sigma
    b = (v["eta0"] - v["eta_mu0"][:, None]) / eta_sigma
    lp = lp + np.sum(w * (-0.5 * a * a - np.log(eps_sigma) - 0.5 * b * b - np.log(eta_sigma) - LOG_2PI), axis=1)
    g["log_eps"] = -w * a / eps_sigma
    g["eps_mu"] = g["eps_mu"] + np.sum(w * a / eps_sigma, axis=1)
    g["log_eps_sigma"] = g["log_eps_sigma"] + np.sum(w * (a * a - 1.0), axis=1)
    g["eta0"] = -w * b / eta_sigma
    g["eta_mu0"] = g["eta_mu0"] + np.sum(w * b / eta_sigma, axis=1)
    g["log_eta_sigma0"] = g["log_eta_sigma0"] + np.sum(w * (b * b - 1.0), axis=1)
    names = [("g1", "fc_gamma"), ("g2", "fc_gamma")]
    if kind == "mr":
        names += [("mu", "mu"), ("logit_phi", "logit_phi")]
    for name, key in names:
        p, dp = _normal(v[name], *cfg[key])
        lp = lp + np.sum(w * p, axis=1)
        g[name] = w * dp
    return lp, g


def hierarchical_log_density(values: dict, programs: Sequence[Program], cfg: HierarchicalConfig):
    """Joint log density of a hierarchical fit on the natural scale.

    ``values`` holds ``eta`` (G, N), ``eta0``, ``log_eps`` (G,), ``fc_gamma``
    (G, 2), ``r_true`` (G, N), the four hyperparameters and, for mean
    reversion, ``mu`` and ``logit_phi`` (G,). Programs must share N.
    """
    data = _prepare([list(programs)], [cfg.prior_scale])
    v = _hier_natural(values, cfg.kind)
    lp, g = _hier_density(v, data, cfg.scaled(), cfg.kind)
    out = {
        "eta": g["eta"][0],
        "eta0": g["eta0"][0],
        "log_eps": g["log_eps"][0],
        "fc_gamma": np.stack([g["g1"][0], g["g2"][0]], axis=-1),
        "r_true": g["log_r"][0] / np.asarray(values["r_true"], dtype=float),
    }
    for k in ("eps_mu", "log_eps_sigma", "eta_mu0", "log_eta_sigma0"):
        out[k] = float(g[k][0])
    if cfg.kind == "mr":
        phi = v["phi"][0]
        out["mu"] = g["mu"][0]
        out["logit_phi"] = g["logit_phi"][0] + g["phi"][0] * phi * (1.0 - phi)
    return float(lp[0]), out


def _hier_natural(values: dict, kind: str) -> dict:
    gam = np.asarray(values["fc_gamma"], dtype=float)
    v = {
        "eta": np.asarray(values["eta"], dtype=float)[None],
        "eta0": np.asarray(values["eta0"], dtype=float)[None],
        "log_eps": np.asarray(values["log_eps"], dtype=float)[None],
        "g1": gam[None, :, 0],
        "g2": gam[None, :, 1],
        "log_r": np.log(np.asarray(values["r_true"], dtype=float))[None],
    }
    for k in ("eps_mu", "log_eps_sigma", "eta_mu0", "log_eta_sigma0"):
        v[k] = np.array([float(values[k])])
    _kind_fields(v, values if kind == "mr" else None, kind)
    return v


def _kind_fields(v, values, kind):
    shape = v["log_eps"].shape
    if kind == "mr":
        v["mu"] = np.asarray(values["mu"], dtype=float).reshape(shape)
        v["logit_phi"] = np.asarray(values["logit_phi"], dtype=float).reshape(shape)
        v["phi"] = _expit(v["logit_phi"])
    else:
        v["mu"] = np.zeros(shape)
        v["phi"] = np.ones(shape)


def _hier_density(v, data: _SSData, cfg: dict, kind: str):
    lp, g = _core(v, data)
    hp, hg = _hyper_terms(v, cfg, kind, data.program_mask)
    for k, val in hg.items():
        g[k] = g[k] + val if k in g else val
    return lp + hp, g


# ---------------------------------------------------------------------------
# sampler adapters


def _reparam(x: dict, data: _SSData, kind: str):
    """Build the natural latent path and true ratios from sampler coordinates."""
    eps = np.exp(x["log_eps"])
    phi = x["phi"]
    a = x["mu"] * (1.0 - phi)
    z = x["z"]
    eta = np.empty_like(z)
    prev = x["eta0"]
    for i in range(z.shape[-1]):
        prev = a + phi * prev + eps * z[..., i]
        eta[..., i] = prev
    offset = data.sigma_xi * x["u_r"]
    return eta, data.log_m + offset, offset


def _backprop(g: dict, x: dict, eta, data: _SSData):
    """Chain rule from natural gradients to the non-centred coordinates."""
    phi = x["phi"]
    eps = np.exp(x["log_eps"])
    z = x["z"]
    w = data.mask
    n = z.shape[-1]
    G = np.empty_like(z)
    acc = np.zeros(z.shape[:-1])
    for i in range(n - 1, -1, -1):
        acc = g["eta"][..., i] + phi * acc
        G[..., i] = acc
    prev = np.concatenate([x["eta0"][..., None], eta[..., :-1]], axis=-1)
    sum_g = G.sum(axis=-1)
    out = {
        "z": eps[..., None] * G,
        "eta0": g["eta0"] + phi * G[..., 0],
        # path derivative plus the log-Jacobian N log eps of z -> eta
        "log_eps": g["log_eps"] + eps * np.sum(z * G, axis=-1) + w.sum(axis=-1),
        "mu": g["mu"] + (1.0 - phi) * sum_g,
        "phi": g["phi"] + np.sum(G * prev, axis=-1) - x["mu"] * sum_g,
        # log r' = log m + sigma_xi u, Jacobian log r' + log sigma_xi
        "u_r": (g["log_r"] + w) * data.sigma_xi,
    }
    return out


def _jacobian_terms(x: dict, data: _SSData, log_r):
    w = data.mask
    return np.sum(w.sum(axis=-1) * x["log_eps"], axis=-1) + np.sum(w * (log_r + np.log(data.sigma_xi)), axis=(1, 2))


def _pad_normal(x: dict, data: _SSData):
    """Standard-normal terms for padded coordinates so the target stays proper."""
    pad = (~data.mask).astype(float)
    lp = -0.5 * np.sum(pad * (x["z"] ** 2 + x["u_r"] ** 2), axis=(1, 2))
    return lp, {"z": -pad * x["z"], "u_r": -pad * x["u_r"]}


class StateSpaceModel(LogDensityModel):
    """Independent (non-hierarchical) rw/mr fits, one program per dataset."""

    def __init__(self, programs: Sequence[Program], kind: str = "rw", kappa: float = 1.0,
                 priors: ForecastPriors | None = None, _data: _SSData | None = None):
        if kind not in KINDS:
            raise ForecastError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.priors = priors or ForecastPriors()
        self.data = _data if _data is not None else _prepare([[p] for p in programs], [kappa] * len(programs))
        self.n_data = self.data.shape[0]
        n = self.data.shape[2]
        params = [Param("z", (n,)), Param("eta0"), Param("log_eps"), Param("fc_gamma", (2,)), Param("u_r", (n,))]
        if kind == "mr":
            params += [Param("mu"), Param("logit_phi")]
        self.space = ParameterSpace(params)

    def take(self, idx):
        return StateSpaceModel((), self.kind, priors=self.priors, _data=self.data.take(idx))

    def _expand(self, values):
        x = {
            "z": values["z"][:, None, :],
            "eta0": values["eta0"][:, None],
            "log_eps": values["log_eps"][:, None],
            "g1": values["fc_gamma"][:, None, 0],
            "g2": values["fc_gamma"][:, None, 1],
            "u_r": values["u_r"][:, None, :],
        }
        if self.kind == "mr":
            x["mu"] = values["mu"][:, None]
            x["logit_phi"] = values["logit_phi"][:, None]
            x["phi"] = _expit(x["logit_phi"])
        else:
            x["mu"] = np.zeros_like(x["eta0"])
            x["phi"] = np.ones_like(x["eta0"])
        return x

    def log_density(self, values):
        x = self._expand(values)
        eta, log_r, offset = _reparam(x, self.data, self.kind)
        v = dict(x, eta=eta, log_r=log_r, log_r_offset=offset)
        lp, g = _core(v, self.data)
        k = self.data.kappa[:, None]
        pri = {name: (loc, sd * k) for name, (loc, sd) in self.priors.scaled(1.0).items()}
        plp, pg = _flat_priors(v, pri, self.kind, np.ones_like(x["eta0"]))
        for name, val in pg.items():
            if name != "logit_phi":
                g[name] = g[name] + val
        out = _backprop(g, x, eta, self.data)
        pad_lp, pad_g = _pad_normal(x, self.data)
        lp = lp + plp + _jacobian_terms(x, self.data, log_r) + pad_lp
        grads = {
            "z": (out["z"] + pad_g["z"])[:, 0],
            "eta0": out["eta0"][:, 0],
            "log_eps": out["log_eps"][:, 0],
            "fc_gamma": np.stack([g["g1"][:, 0], g["g2"][:, 0]], axis=-1),
            "u_r": (out["u_r"] + pad_g["u_r"])[:, 0],
        }
        if self.kind == "mr":
            phi = x["phi"]
            grads["mu"] = out["mu"][:, 0]
            grads["logit_phi"] = (out["phi"] * phi * (1 - phi) + pg["logit_phi"])[:, 0]
        return lp, grads

    def init_values(self, rng):
        n = self.data.shape[2]
        pri = self.priors.scaled(float(self.data.kappa[0]))
        v = {
            "z": rng.normal(size=n),
            "eta0": rng.normal(*pri["eta0"]),
            "log_eps": rng.normal(*pri["log_eps"]),
            "fc_gamma": rng.normal(*pri["fc_gamma"], size=2),
            "u_r": rng.normal(size=n),
        }
        if self.kind == "mr":
            v["mu"] = rng.normal(*pri["mu"])
            v["logit_phi"] = rng.normal(*pri["logit_phi"])
        return v

    def generated(self, values):
        x = self._expand(values)
        eta, log_r, _ = _reparam(x, self.data, self.kind)
        out = {"eta": eta[:, 0], "r_true": np.exp(log_r[:, 0])}
        if self.kind == "mr":
            out["phi"] = x["phi"][:, 0]
        return out


class HierarchicalModel(LogDensityModel):
    """Hierarchical rw/mr over the programs of each dataset (one group per dataset)."""

    HYPERS = ("eps_mu", "log_eps_sigma", "eta_mu0", "log_eta_sigma0")

    def __init__(self, groups: Sequence[Sequence[Program]], cfg: HierarchicalConfig | None = None,
                 _data: _SSData | None = None):
        self.cfg = cfg or HierarchicalConfig()
        self.kind = self.cfg.kind
        self.data = _data if _data is not None else _prepare(groups, [self.cfg.prior_scale] * len(groups))
        self.n_data = self.data.shape[0]
        _, g, n = self.data.shape
        params = [Param(h) for h in self.HYPERS]
        params += [
            Param("zeta", (g,)),
            Param("xi", (g,)),
            Param("z", (g, n)),
            Param("fc_gamma", (g, 2)),
            Param("u_r", (g, n)),
        ]
        if self.kind == "mr":
            params += [Param("mu", (g,)), Param("logit_phi", (g,))]
        self.space = ParameterSpace(params)
        self._cfg = self.cfg.scaled()

    def take(self, idx):
        return HierarchicalModel((), self.cfg, _data=self.data.take(idx))

    def _expand(self, values):
        eps_sigma = np.exp(values["log_eps_sigma"])[:, None]
        eta_sigma = np.exp(values["log_eta_sigma0"])[:, None]
        x = {h: values[h] for h in self.HYPERS}
        x.update(
            zeta=values["zeta"],
            xi=values["xi"],
            log_eps=values["eps_mu"][:, None] + eps_sigma * values["zeta"],
            eta0=values["eta_mu0"][:, None] + eta_sigma * values["xi"],
            z=values["z"],
            g1=values["fc_gamma"][..., 0],
            g2=values["fc_gamma"][..., 1],
            u_r=values["u_r"],
        )
        if self.kind == "mr":
            x["mu"] = values["mu"]
            x["logit_phi"] = values["logit_phi"]
            x["phi"] = _expit(values["logit_phi"])
        else:
            x["mu"] = np.zeros_like(x["log_eps"])
            x["phi"] = np.ones_like(x["log_eps"])
        return x

    def log_density(self, values):
        x = self._expand(values)
        eta, log_r, offset = _reparam(x, self.data, self.kind)
        v = dict(x, eta=eta, log_r=log_r, log_r_offset=offset)
        lp, g = _hier_density(v, self.data, self._scaled_cfg(), self.kind)
        out = _backprop(g, x, eta, self.data)
        pad_lp, pad_g = _pad_normal(x, self.data)
        pm = self.data.program_mask
        eps_sigma = np.exp(values["log_eps_sigma"])
        eta_sigma = np.exp(values["log_eta_sigma0"])
        # padded programs: standard-normal block coordinates
        free = ~pm
        free_lp = -0.5 * np.sum(free * (values["zeta"] ** 2 + values["xi"] ** 2), axis=1)
        free_lp -= 0.5 * np.sum(free[..., None] * (values["fc_gamma"] ** 2), axis=(1, 2))
        lp = lp + _jacobian_terms(x, self.data, log_r) + pad_lp + free_lp
        # non-centred program levels, Jacobian log eps_sigma and log eta_sigma per program
        n_prog = pm.sum(axis=1)
        lp = lp + n_prog * (values["log_eps_sigma"] + values["log_eta_sigma0"])
        g_le = out["log_eps"]
        g_e0 = out["eta0"]
        grads = {
            "eps_mu": g["eps_mu"] + np.sum(g_le * pm, axis=1),
            "log_eps_sigma": g["log_eps_sigma"] + np.sum(g_le * values["zeta"] * pm, axis=1) * eps_sigma + n_prog,
            "eta_mu0": g["eta_mu0"] + np.sum(g_e0 * pm, axis=1),
            "log_eta_sigma0": g["log_eta_sigma0"] + np.sum(g_e0 * values["xi"] * pm, axis=1) * eta_sigma + n_prog,
            "zeta": np.where(pm, g_le * eps_sigma[:, None], -values["zeta"]),
            "xi": np.where(pm, g_e0 * eta_sigma[:, None], -values["xi"]),
            "z": out["z"] + pad_g["z"],
            "fc_gamma": np.where(pm[..., None], np.stack([g["g1"], g["g2"]], axis=-1), -values["fc_gamma"]),
            "u_r": out["u_r"] + pad_g["u_r"],
        }
        if self.kind == "mr":
            phi = x["phi"]
            grads["mu"] = np.where(pm, out["mu"], -values["mu"])
            grads["logit_phi"] = np.where(pm, g["logit_phi"] + out["phi"] * phi * (1 - phi), -values["logit_phi"])
            lp = lp - 0.5 * np.sum(free * (values["mu"] ** 2 + values["logit_phi"] ** 2), axis=1)
        return lp, grads

    def _scaled_cfg(self):
        k = self.data.kappa[:, None]
        cfg = {}
        for name, (loc, sd) in self.cfg.scaled().items():
            sd1 = sd / self.cfg.prior_scale
            cfg[name] = (loc, sd1 * (k if name in ("fc_gamma", "mu", "logit_phi") else k[:, 0]))
        return cfg

    def init_values(self, rng):
        _, g, n = self.data.shape
        cfg = self.cfg.scaled()
        v = {h: rng.normal(*cfg[h]) for h in self.HYPERS}
        v.update(
            zeta=rng.normal(size=g),
            xi=rng.normal(size=g),
            z=rng.normal(size=(g, n)),
            fc_gamma=rng.normal(*cfg["fc_gamma"], size=(g, 2)),
            u_r=rng.normal(size=(g, n)),
        )
        if self.kind == "mr":
            v["mu"] = rng.normal(*cfg["mu"], size=g)
            v["logit_phi"] = rng.normal(*cfg["logit_phi"], size=g)
        return v

    def generated(self, values):
        x = self._expand(values)
        eta, log_r, _ = _reparam(x, self.data, self.kind)
        out = {
            "eta": eta,
            "r_true": np.exp(log_r),
            "log_eps": x["log_eps"],
            "eta0": x["eta0"],
            "eps_sigma": np.exp(values["log_eps_sigma"]),
            "eta_sigma0": np.exp(values["log_eta_sigma0"]),
        }
        if self.kind == "mr":
            out["phi"] = x["phi"]
        return out


# ---------------------------------------------------------------------------
# fitting


def fit_forecast(
    programs: Sequence[Program],
    kind: str = "rw",
    kappa: float = 1.0,
    priors: ForecastPriors | None = None,
    sampler: SamplerConfig | None = None,
) -> list[DrawMatrix]:
    """Independent fits of one program each, batched."""
    return sample_batch(StateSpaceModel(programs, kind, kappa, priors), sampler)


def fit_hierarchical(
    groups: Sequence[Sequence[Program]] | Sequence[Program],
    cfg: HierarchicalConfig | None = None,
    sampler: SamplerConfig | None = None,
) -> list[DrawMatrix] | DrawMatrix:
    """Hierarchical fit per group; a flat list of programs is a single group."""
    single = isinstance(groups[0], Program)
    batch = [list(groups)] if single else [list(g) for g in groups]
    for grp in batch:
        if not grp:
            raise ForecastError("empty program group")
    out = sample_batch(HierarchicalModel(batch, cfg), sampler)
    for dm, grp in zip(out, batch):
        _trim_group(dm, grp)
    return out[0] if single else out


def _trim_group(dm: DrawMatrix, grp: Sequence[Program]) -> None:
    g = len(grp)
    for name, arr in list(dm.draws.items()):
        if arr.ndim >= 3 and arr.shape[2] >= g and name not in HierarchicalModel.HYPERS:
            dm.draws[name] = arr[:, :, :g]


def program_draws(hier: DrawMatrix, g: int, n: int | None = None) -> DrawMatrix:
    """Per-program view of a hierarchical fit with the single-program field layout."""
    draws = {}
    for name in ("eta", "r_true", "fc_gamma", "log_eps", "eta0", "mu", "logit_phi", "phi"):
        if name in hier.draws:
            arr = hier.draws[name][:, :, g]
            if n is not None and name in ("eta", "r_true"):
                arr = arr[..., :n]
            draws[name] = arr
    out = hier.replace_draws(draws)
    out.params = tuple(k for k in draws if k not in ("eta", "r_true", "phi"))
    return out


@dataclass(frozen=True)
class DerivedPriors:
    log_eps: tuple[float, float]
    eta0: tuple[float, float]

    def as_priors(self, base: ForecastPriors | None = None) -> ForecastPriors:
        return replace(base or ForecastPriors(), log_eps=self.log_eps, eta0=self.eta0)


def derive_priors(hier: DrawMatrix, inflation: float = 1.0, rhat_limit: float = 1.01) -> DerivedPriors:
    """Plug-in priors for a single-program model from group-level posterior means."""
    if inflation <= 0:
        raise ForecastError("inflation must be > 0")
    hypers = [h for h in ("eps_mu", "log_eps_sigma", "eta_mu0", "log_eta_sigma0") if h in hier.draws]
    worst = max_rhat(hier, hypers)
    if not worst < rhat_limit:
        raise ForecastError(f"hierarchical fit not converged (max R-hat {worst:.3f} >= {rhat_limit})")
    mean = lambda name: float(np.mean(hier.draws[name]))  # noqa: E731
    sd_eps = float(np.mean(np.exp(hier.draws["log_eps_sigma"])))
    sd_eta = float(np.mean(np.exp(hier.draws["log_eta_sigma0"])))
    return DerivedPriors(
        log_eps=(mean("eps_mu"), sd_eps * inflation),
        eta0=(mean("eta_mu0"), sd_eta * inflation),
    )


# ---------------------------------------------------------------------------
# prediction


def _params(draws: DrawMatrix):
    eta = draws.flat("eta")
    s = eta.shape[0]
    out = {
        "eta": eta,
        "log_eps": draws.flat("log_eps").reshape(s),
        "fc_gamma": draws.flat("fc_gamma").reshape(s, 2),
    }
    if "logit_phi" in draws.draws:
        out["mu"] = draws.flat("mu").reshape(s)
        out["phi"] = _expit(draws.flat("logit_phi").reshape(s))
    else:
        out["mu"] = np.zeros(s)
        out["phi"] = np.ones(s)
    return out


def _transition_mean(p, prev):
    return p["mu"] * (1.0 - p["phi"]) + p["phi"] * prev


@dataclass
class ForecastDraws:
    loss_ratio: np.ndarray  # (S, k)
    loss: np.ndarray
    premiums: np.ndarray = field(repr=False)


def forecast(draws: DrawMatrix, horizon: int, premiums_future, rng: np.random.Generator) -> ForecastDraws:
    """Roll each draw's latent level ``horizon`` years forward and sample ratios and losses."""
    if horizon < 1:
        raise ForecastError("horizon must be >= 1")
    if premiums_future is None:
        raise ForecastError("future premiums are required")
    pf = np.asarray(premiums_future, dtype=float).reshape(-1)
    if pf.shape[0] != horizon:
        raise ForecastError(f"expected {horizon} future premiums, got {pf.shape[0]}")
    if np.any(~(pf > 0)):
        raise ForecastError("future premiums must be > 0")
    p = _params(draws)
    s = p["eta"].shape[0]
    eps = np.exp(p["log_eps"])
    sig = observation_sd(p["fc_gamma"], pf[None, :])
    level = p["eta"][:, -1]
    ratios = np.empty((s, horizon))
    for h in range(horizon):
        level = _transition_mean(p, level) + eps * rng.standard_normal(s)
        ratios[:, h] = np.exp(level + sig[:, h] * rng.standard_normal(s))
    return ForecastDraws(loss_ratio=ratios, loss=ratios * pf[None, :], premiums=pf)


def posterior_predictive(draws: DrawMatrix, premiums, rng: np.random.Generator) -> np.ndarray:
    """In-sample predictive ratios ``(S, N)`` from each draw's latent levels."""
    p = _params(draws)
    sig = observation_sd(p["fc_gamma"], np.asarray(premiums, dtype=float)[None, :])
    return np.exp(p["eta"] + sig * rng.standard_normal(p["eta"].shape))


def log_predictive_density(draws: DrawMatrix, index: int, ratio: float, premium: float) -> np.ndarray:
    """Per-draw log density of a loss ratio for 0-based accident year ``index``.

    In-sample years use ``Lognormal(eta_i, sigma_i)``; the year right after the
    fitted ones integrates the one-step innovation analytically,
    ``Lognormal(transition mean, sqrt(eps^2 + sigma^2))``.
    """
    p = _params(draws)
    n = p["eta"].shape[1]
    sig = observation_sd(p["fc_gamma"], np.array([[premium]]))[:, 0]
    if index < n:
        loc, scale = p["eta"][:, index], sig
    elif index == n:
        loc = _transition_mean(p, p["eta"][:, -1])
        scale = np.sqrt(np.exp(2 * p["log_eps"]) + sig**2)
    else:
        raise ForecastError(f"accident year index {index} is more than one step past the fitted years")
    lr = np.log(ratio)
    zz = (lr - loc) / scale
    return -lr - np.log(scale) - 0.5 * LOG_2PI - 0.5 * zz * zz


def sample_forecast_prior(
    kind: str,
    n: int,
    rng: np.random.Generator,
    kappa: float = 1.0,
    priors: ForecastPriors | None = None,
) -> MeanReversionParams | RandomWalkParams:
    """One draw of the latent path and parameters from the priors (true ratios from the observation model)."""
    pri = (priors or ForecastPriors()).scaled(kappa)
    eta0 = rng.normal(*pri["eta0"])
    log_eps = rng.normal(*pri["log_eps"])
    gam = rng.normal(*pri["fc_gamma"], size=2)
    mu = rng.normal(*pri["mu"]) if kind == "mr" else 0.0
    lphi = rng.normal(*pri["logit_phi"]) if kind == "mr" else np.inf
    phi = float(_expit(lphi))
    eta = np.empty(n)
    prev = eta0
    for i in range(n):
        prev = mu * (1 - phi) + phi * prev + np.exp(log_eps) * rng.standard_normal()
        eta[i] = prev
    kw = dict(eta=eta, eta0=float(eta0), log_eps=float(log_eps), fc_gamma=gam, r_true=np.full(n, np.nan))
    if kind == "mr":
        return MeanReversionParams(**kw, mu=float(mu), logit_phi=float(lphi))
    return RandomWalkParams(**kw)


FORECAST_COLUMNS = ("triangle_id", "accident_year", "draw", "loss_ratio", "loss")


def write_forecast_draws(path: str | Path, rows: Sequence[tuple[str, Sequence, ForecastDraws]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORECAST_COLUMNS)
        for tid, years, fd in rows:
            for k, ay in enumerate(years):
                for d in range(fd.loss_ratio.shape[0]):
                    w.writerow((tid, ay, d, repr(float(fd.loss_ratio[d, k])), repr(float(fd.loss[d, k]))))
