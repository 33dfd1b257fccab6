import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from lossflow.inference import (
    DrawMatrix,
    GradientCheckError,
    Param,
    ParameterSpace,
    SamplerConfig,
    UndefinedDiagnostic,
    check_gradient,
    ess,
    mcse_mean,
    rhat,
    sample,
    summary,
    thin,
)
from lossflow.inference import _warm_start

from models import ConjugateNormal, Constrained, Flat, Gaussian


def test_space_layout_and_names():
    sp = ParameterSpace([Param("a", (2, 3)), Param("b"), Param("c", (4,), "positive")])
    assert sp.dim == 2 * 3 + 1 + 4
    assert sp.flat_names()[:2] == ["a[0,0]", "a[0,1]"]
    assert sp.flat_names()[6] == "b"
    with pytest.raises(ValueError):
        ParameterSpace([Param("a"), Param("a")])
    with pytest.raises(ValueError):
        Param("z", (), "simplex")


@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3))
def test_transform_round_trip(xs):
    sp = ParameterSpace([Param("r"), Param("p", (), "positive"), Param("u", (), "unit")])
    x = np.array(xs)
    back = sp.unconstrain(sp.constrain(x[None, :]))[0]
    np.testing.assert_allclose(back[:2], x[:2], rtol=1e-12, atol=1e-12)
    # logit near 0 or 1 loses digits in proportion to exp(|x|)
    assert abs(back[2] - x[2]) <= 1e-14 * np.exp(abs(x[2])) + 1e-14


def test_log_jacobian_matches_numeric_derivative():
    sp = ParameterSpace([Param("p", (), "positive"), Param("u", (), "unit")])
    x = np.array([[0.3, -1.2]])
    _, deriv, logj, dlogj = sp.transform(x)
    assert logj[0] == pytest.approx(np.log(deriv["p"][0, 0]) + np.log(deriv["u"][0, 0]), rel=1e-14)
    h = 1e-6
    for k in range(2):
        e = np.zeros((1, 2))
        e[0, k] = h
        fd = (sp.transform(x + e)[2] - sp.transform(x - e)[2]) / (2 * h)
        assert fd[0] == pytest.approx(dlogj[0, k], rel=1e-6)


def test_check_gradient_quadratic():
    m = Gaussian([0.0], [[1.0]])
    assert check_gradient(m, np.array([1.0])) < 1e-6
    assert m.logp_grad(np.array([[1.0]]))[1][0, 0] == pytest.approx(-1.0)


def test_check_gradient_detects_corruption():
    assert check_gradient(Constrained(), np.array([0.4, -0.3])) < 1e-7
    assert check_gradient(Constrained(corrupt=0.1), np.array([0.4, -0.3])) > 1e-2
    with pytest.raises(GradientCheckError):
        sample(Constrained(corrupt=0.1), SamplerConfig(chains=1, warmup=10, draws=10))


def test_standard_normal_recovered():
    d = sample(Gaussian([0.0], [[1.0]]), SamplerConfig(seed=3))
    x = d.quantity("x[0]")
    assert abs(x.mean()) < 3 * mcse_mean(x)
    assert x.std() == pytest.approx(1.0, rel=0.05)
    assert rhat(x) < 1.01
    assert d.divergences == 0


def test_correlated_gaussian():
    cov = [[1.0, 0.9], [0.9, 1.0]]
    d = sample(Gaussian([1.0, -1.0], cov), SamplerConfig(seed=4))
    x = d.flat("x")
    assert np.corrcoef(x.T)[0, 1] == pytest.approx(0.9, abs=0.05)


def test_flat_target_stays_finite():
    d = sample(Flat(), SamplerConfig(chains=2, warmup=100, draws=200, seed=1))
    assert np.all(np.isfinite(d.flat("x")))
    assert d.divergences == 0


def test_conjugate_posterior():
    rng = np.random.default_rng(0)
    model = ConjugateNormal(rng.normal(1.3, 1.0, size=20))
    mean, sd = model.posterior()
    d = sample(model, SamplerConfig(seed=11))
    th = d.quantity("theta")
    assert abs(th.mean() - mean) < 3 * mcse_mean(th)
    assert th.std() == pytest.approx(sd, rel=0.05)
    assert rhat(th) < 1.01


def test_constraints_preserved_and_moments():
    d = sample(Constrained(), SamplerConfig(seed=2))
    s, b = d.flat("s"), d.flat("b")
    assert np.all(s > 0) and np.all((b > 0) & (b < 1))
    assert s.mean() == pytest.approx(stats.gamma(3).mean(), abs=4 * mcse_mean(d, "s"))
    assert b.mean() == pytest.approx(stats.beta(2, 5).mean(), abs=4 * mcse_mean(d, "b"))


def test_sampler_is_deterministic():
    cfg = SamplerConfig(chains=2, warmup=100, draws=50, seed=9)
    a = sample(Constrained(), cfg)
    b = sample(Constrained(), cfg)
    for k in a.draws:
        np.testing.assert_array_equal(a.draws[k], b.draws[k])
    c = sample(Constrained(), SamplerConfig(chains=2, warmup=100, draws=50, seed=10))
    assert not np.array_equal(a.draws["s"], c.draws["s"])


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(chains=0)
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.0)
    with pytest.raises(ValueError):
        SamplerConfig(init_steps=-1)


def test_warm_start_climbs_from_a_steep_start():
    # one stiff coordinate gives gradients of order 1e5 at the start
    model = Gaussian([1.0, 2.0], np.diag([1e-4, 1.0]))
    x0 = np.array([[8.0, -6.0], [1.0, 2.0]])
    lp0, g0 = model.logp_grad(x0)
    x, lp, grad = _warm_start(model, x0, lp0, g0, 200)
    assert np.all(lp >= lp0)
    np.testing.assert_allclose(x, [[1.0, 2.0], [1.0, 2.0]], atol=0.05)
    np.testing.assert_array_equal(model.logp_grad(x)[0], lp)
    same = _warm_start(model, x0, lp0, g0, 0)
    np.testing.assert_array_equal(same[0], x0)


def test_rhat_oracles(rng):
    iid = rng.standard_normal((4, 1000))
    assert rhat(iid) < 1.01
    offset = iid + 5.0 * np.arange(4)[:, None]
    assert rhat(offset) > 1.5
    with pytest.raises(UndefinedDiagnostic):
        rhat(np.ones((4, 100)))


def test_ess_oracles(rng):
    iid = rng.standard_normal((4, 1000))
    assert 0.8 * 4000 <= ess(iid) <= 1.2 * 4000
    phi = 0.9
    ar = np.empty((4, 5000))
    ar[:, 0] = rng.standard_normal(4)
    for t in range(1, ar.shape[1]):
        ar[:, t] = phi * ar[:, t - 1] + np.sqrt(1 - phi**2) * rng.standard_normal(4)
    expected = ar.size * (1 - phi) / (1 + phi)
    assert ess(ar) == pytest.approx(expected, rel=0.25)
    with pytest.raises(UndefinedDiagnostic):
        ess(np.zeros((4, 100)))


def _draws(chains=4, iters=1000):
    rng = np.random.default_rng(1)
    return DrawMatrix({"a": rng.standard_normal((chains, iters)), "v": rng.standard_normal((chains, iters, 2, 3))}, params=("a", "v"))


def test_thin_examples():
    d = _draws()
    assert thin(d, 10).n_draws == 400
    assert thin(d, 1).n_draws == d.n_draws
    np.testing.assert_array_equal(thin(d, 1).draws["a"], d.draws["a"])
    with pytest.raises(ValueError):
        thin(_draws(iters=10), 11)


def test_draw_matrix_csv_round_trip(tmp_path):
    d = _draws(2, 7)
    d.divergences = 3
    d.to_csv(tmp_path / "d.csv")
    back = DrawMatrix.from_csv(tmp_path / "d.csv")
    for k in d.draws:
        np.testing.assert_array_equal(back.draws[k], d.draws[k])
    assert back.divergences == 3 and back.params == ("a", "v")
    assert back.quantity("v[1,2]").shape == (2, 7)
    assert (tmp_path / "d.json").exists()


def test_summary_rows():
    rows = summary(_draws(), ["a"])
    assert rows[0]["quantity"] == "a"
    assert rows[0]["rhat"] < 1.01
