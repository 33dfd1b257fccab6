"""Synthetic triangles and corpora for calibration, backtests and the sample data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .development import BondyParams, ChainLadderParams, DevConfig, simulate_paths
from .triangle import Triangle


def simulate_dev_triangle(
    body: ChainLadderParams,
    tail: BondyParams,
    cfg: DevConfig,
    n: int,
    m: int,
    rng: np.random.Generator,
    first_column: np.ndarray | None = None,
    premiums: np.ndarray | None = None,
    triangle_id: str = "sim",
    line: str = "SIM",
) -> Triangle:
    """Full-square triangle drawn from the development models with fixed parameters.

    The first column defaults to ``Lognormal(log 0.5, 0.5)`` loss ratios on unit
    premium. Lags up to ``tau`` follow the chain ladder, later ones the tail.
    """
    premiums = np.ones(n) if premiums is None else np.asarray(premiums, dtype=float)
    if first_column is None:
        first_column = premiums * np.exp(rng.normal(np.log(0.5), 0.5, size=n))
    seed = np.full((n, m), np.nan)
    seed[:, 0] = first_column
    t0 = Triangle(triangle_id, line, seed, premiums)
    params = {
        "log_alpha": np.asarray(body.log_alpha, dtype=float)[None, : m - 1],
        "gamma1": np.array([body.gamma1], dtype=float),
        "gamma2": np.array([body.gamma2], dtype=float),
        "log_omega": np.array([tail.log_omega], dtype=float),
        "logit_beta": np.array([tail.logit_beta], dtype=float),
        "lambda1": np.array([tail.lambda1], dtype=float),
        "lambda2": np.array([tail.lambda2], dtype=float),
    }
    sim_cfg = DevConfig(tau=cfg.tau, rho=cfg.rho, loss_scale=cfg.scale_for(t0), sigma_scale=1.0)
    paths = simulate_paths(params, t0, sim_cfg, rng, until=m)[0]
    return Triangle(triangle_id, line, paths, premiums)


@dataclass(frozen=True)
class RandomWalkCorpusSpec:
    """Group-level truth for a corpus whose ultimates follow a random walk."""

    eps_mu: float = np.log(0.25)
    eps_sigma: float = 0.2
    eta_mu0: float = np.log(0.65)
    eta_sigma0: float = 0.15
    obs_gamma: tuple[float, float] = (-3.5, -1.0)
    premium: float = 2.0e4
    premium_growth: float = 0.03
    link_sd: float = 0.08


DEFAULT_PATTERN_RATE = 0.45


def development_pattern(m: int, rate: float = DEFAULT_PATTERN_RATE) -> np.ndarray:
    """Cumulative share of ultimate reported by lag, reaching 1 at lag ``m``."""
    j = np.arange(1, m + 1)
    share = (1 - np.exp(-rate * j)) / (1 - np.exp(-rate * m))
    return share


def walk_back_triangle(
    ultimates: np.ndarray,
    premiums: np.ndarray,
    rng: np.random.Generator,
    link_sd: float = 0.08,
    rate: float = DEFAULT_PATTERN_RATE,
    triangle_id: str = "T",
    line: str = "SIM",
    accident_years: tuple = (),
) -> Triangle:
    """Full-square triangle whose last column equals ``ultimates``.

    Earlier lags divide by noisy link ratios around a smooth pattern, with the
    noise shrinking as lags mature.
    """
    n = ultimates.shape[0]
    m = n
    share = development_pattern(m, rate)
    base = np.log(share[1:] / share[:-1])  # log link into lag j+1
    losses = np.empty((n, m))
    losses[:, -1] = ultimates
    for j in range(m - 2, -1, -1):
        sd = link_sd * np.exp(-0.35 * j)
        log_link = np.abs(base[j] + sd * rng.standard_normal(n))
        losses[:, j] = losses[:, j + 1] / np.exp(log_link)
    return Triangle(triangle_id, line, losses, premiums, accident_years=accident_years)


def simulate_rw_corpus(
    n_programs: int,
    n: int,
    rng: np.random.Generator,
    spec: RandomWalkCorpusSpec | None = None,
    line: str = "SIM",
    prefix: str = "rw",
) -> tuple[list[Triangle], dict]:
    """Full-square triangles whose ultimate loss ratios follow the hierarchical random walk."""
    spec = spec or RandomWalkCorpusSpec()
    triangles = []
    truth = {"log_eps": [], "eta0": [], "eta": [], "ratio": []}
    for g in range(n_programs):
        log_eps = rng.normal(spec.eps_mu, spec.eps_sigma)
        eta0 = rng.normal(spec.eta_mu0, spec.eta_sigma0)
        eta = eta0 + np.cumsum(np.exp(log_eps) * rng.standard_normal(n))
        prem = spec.premium * np.exp(rng.normal(0, 0.5)) * (1 + spec.premium_growth) ** np.arange(n)
        sig = np.sqrt(np.exp(2 * spec.obs_gamma[0]) + np.exp(2 * spec.obs_gamma[1]) / np.sqrt(prem))
        ratio = np.exp(eta + sig * rng.standard_normal(n))
        t = walk_back_triangle(ratio * prem, prem, rng, spec.link_sd, triangle_id=f"{prefix}{g + 1:03d}", line=line)
        triangles.append(t)
        truth["log_eps"].append(log_eps)
        truth["eta0"].append(eta0)
        truth["eta"].append(eta)
        truth["ratio"].append(ratio)
    return triangles, {k: np.array(v) for k, v in truth.items()}


LINE_PROFILES = {
    # (ultimate ratio level, walk SD, pattern rate, link noise)
    "PP": (0.70, 0.10, 0.90, 0.05),
    "CA": (0.68, 0.12, 0.70, 0.07),
    "WC": (0.72, 0.14, 0.35, 0.09),
    "OO": (0.62, 0.16, 0.30, 0.10),
}


def sample_corpus(rng: np.random.Generator, per_line: int = 5, n: int = 10) -> list[Triangle]:
    """Four-line corpus of full-square triangles resembling a public reserving dataset."""
    out = []
    for line, (level, walk, rate, link_sd) in LINE_PROFILES.items():
        for g in range(per_line):
            prem = 1.0e4 * np.exp(rng.normal(0, 0.7)) * 1.02 ** np.arange(n)
            eta = np.log(level) + rng.normal(0, 0.08) + np.cumsum(walk * rng.standard_normal(n))
            ratio = np.exp(eta + 0.05 * rng.standard_normal(n))
            ult = np.round(ratio * prem, 2)
            t = walk_back_triangle(
                ult,
                np.round(prem, 2),
                rng,
                link_sd,
                rate,
                triangle_id=f"{line}{g + 1:02d}",
                line=line,
                accident_years=tuple(range(1988, 1988 + n)),
            )
            out.append(t.replace(losses=np.round(t.losses, 2)))
    return out
