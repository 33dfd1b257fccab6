import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from lossflow.development import DevConfig, sample_dev_prior
from lossflow.inference import DrawMatrix, SamplerConfig
from lossflow.simulate import simulate_dev_triangle
from lossflow.triangle import Triangle, to_runoff
from lossflow.validation import (
    SbcConfig,
    ValidationError,
    band_violations,
    bin_probabilities,
    predictive_check,
    rank_histogram,
    rank_statistic,
    run_sbc,
    uniform_band,
)


def test_rank_examples():
    assert rank_statistic(0.5, [0.1, 0.2, 0.9]) == 2
    assert rank_statistic(-1.0, np.linspace(0, 1, 400)) == 0
    assert rank_statistic(2.0, np.linspace(0, 1, 400)) == 400
    with pytest.raises(ValidationError):
        rank_statistic(0.0, [])


def test_ties_split_at_random():
    rng = np.random.default_rng(0)
    ranks = [rank_statistic(1.0, np.ones(10), rng) for _ in range(4000)]
    assert np.mean(ranks) == pytest.approx(5.0, abs=0.1)
    assert min(ranks) >= 0 and max(ranks) <= 10


# integer inputs with power-of-two scales keep every transform exact
@given(
    st.lists(st.integers(-1000, 1000), min_size=1, max_size=50),
    st.integers(-1000, 1000),
    st.sampled_from([0.25, 0.5, 2.0, 8.0]),
    st.integers(-5, 5),
)
def test_rank_is_equivariant(samples, theta, scale, shift):
    s = np.array(samples, dtype=float)
    base = rank_statistic(theta, s, np.random.default_rng(1))
    assert rank_statistic(scale * theta + shift, scale * s + shift, np.random.default_rng(1)) == base
    assert rank_statistic(np.exp(theta / 1e3), np.exp(s / 1e3), np.random.default_rng(1)) == base


def test_uniform_band_examples():
    assert uniform_band(1000, 20, 0.99) == (33, 69)
    lo = stats.binom.ppf(0.005, 1000, 0.05)
    hi = stats.binom.ppf(0.995, 1000, 0.05)
    assert (lo, hi) == (33, 69)
    lo, hi = uniform_band(20, 20)
    assert lo <= 1 <= hi
    with pytest.raises(ValidationError):
        uniform_band(100, 1)
    with pytest.raises(ValidationError):
        uniform_band(10, 20)


def test_bins_and_histograms():
    p = bin_probabilities(400, 20)
    assert p.sum() == pytest.approx(1.0)
    counts = rank_histogram(np.arange(401), 400, 20)
    assert counts.sum() == 401
    np.testing.assert_allclose(counts / 401, p)
    c = rank_histogram(np.array([0.0, 0.5, 0.999, 1.0]), 1.0, 4, continuous=True)
    assert c.tolist() == [1, 0, 1, 2]


def test_band_violations_detects_u_shape():
    rng = np.random.default_rng(0)
    flat = rank_histogram(rng.integers(0, 401, 400), 400, 20)
    assert band_violations(flat, probs=bin_probabilities(400, 20)) <= 1
    u = rank_histogram(np.concatenate([rng.integers(0, 20, 200), rng.integers(381, 401, 200)]), 400, 20)
    assert band_violations(u, probs=bin_probabilities(400, 20)) > 5


def test_sbc_config_bounds():
    with pytest.raises(ValidationError):
        SbcConfig(n_sims=49)
    with pytest.raises(ValidationError):
        SbcConfig(family="stack")


def test_forecast_sbc_plumbing(tmp_path):
    cfg = SbcConfig(
        family="forecast",
        n_sims=50,
        n_accident_years=6,
        sampler=SamplerConfig(chains=2, warmup=60, draws=40, seed=3),
        thin=4,
        bins=5,
        seed=3,
    )
    rep = run_sbc(cfg)
    assert rep.max_rank == 2 * 10
    for q in rep.quantities:
        assert rep.histograms[q].sum() == rep.n_retained
        assert np.all((rep.ranks[q] >= 0) & (rep.ranks[q] <= rep.max_rank))
    assert rep.n_retained + len(rep.excluded) == 50
    assert len(rep.convergence) <= 50
    assert rep.unreliable == (rep.excluded_fraction > 0.2)
    paths = rep.write(tmp_path)
    data = json.loads(paths[0].read_text())
    assert data["n_sims"] == 50 and set(data["quantities"]) == set(rep.quantities)
    if rep.n_retained < cfg.bins:
        assert data["band_lo"] is None


def _exact_triangle(n=5):
    links = np.array([1.5, 1.2, 1.1, 1.05])
    losses = np.empty((n, 5))
    losses[:, 0] = 100.0 + 10 * np.arange(n)
    for j in range(1, 5):
        losses[:, j] = losses[:, j - 1] * links[j - 1]
    return to_runoff(Triangle("E", "PP", losses, np.full(n, 200.0))), links


def _point_draws(s, log_alpha, g1, g2, log_omega=0.0, logit_beta=0.0, l1=-80.0, l2=0.0):
    la = np.broadcast_to(np.asarray(log_alpha, dtype=float), (1, s, len(log_alpha))).copy()
    full = lambda v: np.full((1, s), v)  # noqa: E731
    body = DrawMatrix({"log_alpha": la, "gamma1": full(g1), "gamma2": full(g2)})
    tail = DrawMatrix({"log_omega": full(log_omega), "logit_beta": full(logit_beta), "lambda1": full(l1), "lambda2": full(l2)})
    return body, tail


def test_degenerate_posterior_covers_everything():
    t, links = _exact_triangle()
    draws = _point_draws(200, np.log(links), -80.0, 0.0)
    chk = predictive_check(t, DevConfig(tau=5, rho=(2, 5)), np.random.default_rng(0), draws=draws)
    assert chk.coverage == {0.5: 1.0, 0.9: 1.0}
    assert chk.n_cells == 10
    assert chk.trajectories.shape == (30, 5, 5)


def test_well_specified_coverage():
    cfg = DevConfig(tau=4, rho=(5, 8), loss_scale=1.0)
    rng = np.random.default_rng(11)
    body, tail = sample_dev_prior(cfg, rng, 8)
    body.gamma1, body.gamma2 = -3.0, -0.3
    tail.lambda1, tail.lambda2 = -4.0, -0.3
    draws = _point_draws(
        4000, body.log_alpha, body.gamma1, body.gamma2, tail.log_omega, tail.logit_beta, tail.lambda1, tail.lambda2
    )
    inside, cells = 0.0, 0
    for k in range(10):
        t = to_runoff(simulate_dev_triangle(body, tail, cfg, 8, 8, rng, triangle_id=f"W{k}"))
        chk = predictive_check(t, cfg, rng, draws=draws)
        inside += chk.coverage[0.9] * chk.n_cells
        cells += chk.n_cells
    assert cells >= 200
    assert 0.85 <= inside / cells <= 0.95


def test_prior_mode_needs_no_fit(tmp_path):
    t, _ = _exact_triangle()
    chk = predictive_check(t, DevConfig(tau=3, rho=(2, 5)), np.random.default_rng(0), mode="prior", n_prior=200)
    assert chk.mode == "prior" and chk.trajectories.shape[0] == 30
    files = chk.write(tmp_path)
    assert all(p.exists() for p in files)
    with pytest.raises(ValidationError):
        predictive_check(t, DevConfig(), np.random.default_rng(0), mode="posterior")
