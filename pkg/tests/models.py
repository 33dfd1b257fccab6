"""Small analytic targets for exercising the sampler."""

import numpy as np

from lossflow.inference import LogDensityModel, Param, ParameterSpace


class Gaussian(LogDensityModel):
    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.prec = np.linalg.inv(np.atleast_2d(cov))
        self.space = ParameterSpace([Param("x", (self.mean.size,))])

    def log_density(self, values):
        diff = values["x"] - self.mean
        g = -diff @ self.prec
        return 0.5 * np.sum(g * diff, axis=1), {"x": g}

    def init_values(self, rng):
        return {"x": rng.normal(size=self.mean.size)}

    def take(self, idx):
        return self


class ConjugateNormal(LogDensityModel):
    """``theta ~ N(m0, s0)``, ``y_i ~ N(theta, sigma)`` with a closed-form posterior."""

    def __init__(self, y, sigma=1.0, m0=0.0, s0=2.0):
        self.y, self.sigma, self.m0, self.s0 = np.asarray(y, dtype=float), sigma, m0, s0
        self.space = ParameterSpace([Param("theta")])

    def posterior(self):
        prec = 1 / self.s0**2 + self.y.size / self.sigma**2
        mean = (self.m0 / self.s0**2 + self.y.sum() / self.sigma**2) / prec
        return mean, prec**-0.5

    def log_density(self, values):
        th = values["theta"]
        r = self.y[None, :] - th[:, None]
        lp = -0.5 * np.sum(r * r, axis=1) / self.sigma**2 - 0.5 * (th - self.m0) ** 2 / self.s0**2
        g = np.sum(r, axis=1) / self.sigma**2 - (th - self.m0) / self.s0**2
        return lp, {"theta": g}

    def init_values(self, rng):
        return {"theta": np.array(rng.normal(self.m0, self.s0))}

    def take(self, idx):
        return self


class Flat(LogDensityModel):
    def __init__(self):
        self.space = ParameterSpace([Param("x", (2,))])

    def log_density(self, values):
        x = values["x"]
        return np.zeros(x.shape[0]), {"x": np.zeros_like(x)}

    def init_values(self, rng):
        return {"x": rng.normal(size=2)}

    def take(self, idx):
        return self


class Constrained(LogDensityModel):
    """Gamma(3, 1) on a positive scalar and Beta(2, 5) on a unit scalar."""

    def __init__(self, corrupt=0.0):
        self.corrupt = corrupt
        self.space = ParameterSpace([Param("s", (), "positive"), Param("b", (), "unit")])

    def log_density(self, values):
        s, b = values["s"], values["b"]
        lp = 2 * np.log(s) - s + np.log(b) + 4 * np.log1p(-b)
        return lp, {"s": 2 / s - 1 + self.corrupt, "b": 1 / b - 4 / (1 - b)}

    def init_values(self, rng):
        return {"s": np.array(rng.gamma(3.0)), "b": np.array(rng.beta(2, 5))}

    def take(self, idx):
        return self
