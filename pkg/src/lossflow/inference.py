"""Gradient-based MCMC over model-supplied log densities.

The sampler is static Hamiltonian Monte Carlo with a jittered number of
leapfrog steps, Stan-style windowed warmup (dual-averaging step size plus a
diagonal inverse metric) and per-chain counter-based random streams.

Every chain is a row of one vectorised numpy batch. A model may bind several
independent datasets (``n_data``); each gets ``chains`` rows, so a whole
simulation study can run as a single batch on one core.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("real", "positive", "unit")


class GradientCheckError(RuntimeError):
    pass


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Param:
    name: str
    shape: tuple[int, ...] = ()
    kind: str = "real"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int))


class ParameterSpace:
    """Ordered named parameters with unconstrained <-> constrained transforms.

    ``positive`` parameters are ``exp(x)`` and ``unit`` parameters are
    ``logistic(x)``; the log-Jacobian of each map is returned alongside so a
    density on the constrained scale can be sampled in ``x``.
    """

    def __init__(self, params: Sequence[Param]):
        self.params = tuple(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.slices: dict[str, slice] = {}
        k = 0
        for p in self.params:
            self.slices[p.name] = slice(k, k + p.size)
            k += p.size
        self.dim = k

    def __iter__(self):
        return iter(self.params)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def flat_names(self) -> list[str]:
        return [n for p in self.params for n in _element_names(p.name, p.shape)]

    def constrain(self, x: np.ndarray) -> dict[str, np.ndarray]:
        return self.transform(x)[0]

    def transform(self, x: np.ndarray):
        """Return ``(values, dvalue_dx, log_jacobian, dlogjac_dx)`` for batched ``x``."""
        x = np.atleast_2d(x)
        b = x.shape[0]
        values, deriv = {}, {}
        logj = np.zeros(b)
        dlogj = np.zeros_like(x)
        for p in self.params:
            sl = self.slices[p.name]
            u = x[:, sl]
            if p.kind == "real":
                v, d = u, np.ones_like(u)
            elif p.kind == "positive":
                v = np.exp(u)
                d = v
                logj += u.sum(axis=1)
                dlogj[:, sl] = 1.0
            else:
                v = _expit(u)
                d = v * (1.0 - v)
                logj += np.sum(np.log(d), axis=1)
                dlogj[:, sl] = 1.0 - 2.0 * v
            values[p.name] = v.reshape((b,) + p.shape)
            deriv[p.name] = d
        return values, deriv, logj, dlogj

    def unconstrain(self, values: dict[str, np.ndarray]) -> np.ndarray:
        first = np.asarray(values[self.params[0].name])
        b = first.shape[0] if first.ndim > len(self.params[0].shape) else None
        cols = []
        for p in self.params:
            v = np.asarray(values[p.name], dtype=float)
            v = v.reshape((b if b is not None else 1, p.size))
            if p.kind == "positive":
                v = np.log(v)
            elif p.kind == "unit":
                v = np.log(v) - np.log1p(-v)
            cols.append(v)
        x = np.concatenate(cols, axis=1)
        return x if b is not None else x[0]


def _element_names(name: str, shape: tuple[int, ...]) -> list[str]:
    if not shape:
        return [name]
    return [f"{name}[{','.join(map(str, idx))}]" for idx in np.ndindex(*shape)]


def _expit(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


class LogDensityModel:
    """Base class for models consumed by :func:`sample`.

    Subclasses set ``space`` and ``n_data`` and implement

    * ``log_density(values)`` - batched log density on the constrained scale
      and its gradient with respect to each constrained parameter;
    * ``init_values(rng)`` - one prior draw as a dict of constrained values;
    * ``take(idx)`` - the same model with datasets gathered by ``idx`` so row
      ``b`` of a batch is evaluated against dataset ``idx[b]``.

    ``generated(values)`` may add derived quantities to stored draws.
    """

    space: ParameterSpace
    n_data: int = 1

    def log_density(self, values: dict[str, np.ndarray]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError

    def init_values(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def take(self, idx: np.ndarray) -> "LogDensityModel":
        raise NotImplementedError

    def generated(self, values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {}

    def logp_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Log density and gradient in unconstrained coordinates, batched over rows."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        values, deriv, logj, dlogj = self.space.transform(x)
        lp, grads = self.log_density(values)
        g = dlogj.copy()
        b = x.shape[0]
        for p in self.space:
            sl = self.space.slices[p.name]
            g[:, sl] += np.reshape(grads[p.name], (b, p.size)) * deriv[p.name]
        return np.asarray(lp, dtype=float) + logj, g


@dataclass
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    target_accept: float = 0.8
    max_leapfrog: int = 1024
    seed: int = 0
    path_length: float = 3.0
    gradient_tol: float = 1e-4
    init_steps: int = 200

    def __post_init__(self) -> None:
        for name in ("chains", "warmup", "draws", "max_leapfrog"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")
        if self.path_length <= 0:
            raise ValueError("path_length must be > 0")
        if self.init_steps < 0:
            raise ValueError("init_steps must be >= 0")


@dataclass
class DrawMatrix:
    """Posterior draws as ``{name: array (chains, iterations, *shape)}``."""

    draws: dict[str, np.ndarray]
    seed: int = 0
    divergences: int = 0
    warmup_divergences: int = 0
    step_size: np.ndarray = field(default_factory=lambda: np.zeros(0))
    accept_stat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean_leapfrog: np.ndarray = field(default_factory=lambda: np.zeros(0))
    params: tuple[str, ...] = ()

    @property
    def chains(self) -> int:
        return next(iter(self.draws.values())).shape[0]

    @property
    def iterations(self) -> int:
        return next(iter(self.draws.values())).shape[1]

    @property
    def n_draws(self) -> int:
        return self.chains * self.iterations

    @property
    def divergence_fraction(self) -> float:
        return self.divergences / max(self.n_draws, 1)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.draws[name]

    def __contains__(self, name: str) -> bool:
        return name in self.draws

    def flat(self, name: str) -> np.ndarray:
        a = self.draws[name]
        return a.reshape((-1,) + a.shape[2:])

    def quantities(self, names: Sequence[str] | None = None) -> list[str]:
        names = list(self.draws) if names is None else names
        return [q for n in names for q in _element_names(n, self.draws[n].shape[2:])]

    def quantity(self, q: str) -> np.ndarray:
        """``(chains, iterations)`` draws of a scalar element such as ``log_alpha[2]``."""
        if q in self.draws:
            a = self.draws[q]
            if a.ndim != 2:
                raise KeyError(f"{q} is not scalar; index it like {q}[0]")
            return a
        name, _, rest = q.partition("[")
        if name not in self.draws or not rest.endswith("]"):
            raise KeyError(q)
        idx = tuple(int(s) for s in rest[:-1].split(","))
        return self.draws[name][(slice(None), slice(None)) + idx]

    def subset(self, names: Sequence[str]) -> "DrawMatrix":
        out = self.replace_draws({n: self.draws[n] for n in names})
        out.params = tuple(n for n in self.params if n in names)
        return out

    def replace_draws(self, draws: dict[str, np.ndarray]) -> "DrawMatrix":
        return DrawMatrix(
            draws=draws,
            seed=self.seed,
            divergences=self.divergences,
            warmup_divergences=self.warmup_divergences,
            step_size=self.step_size,
            accept_stat=self.accept_stat,
            mean_leapfrog=self.mean_leapfrog,
            params=self.params,
        )

    def metadata(self) -> dict:
        return {
            "seed": int(self.seed),
            "chains": self.chains,
            "iterations": self.iterations,
            "divergences": int(self.divergences),
            "warmup_divergences": int(self.warmup_divergences),
            "step_size": [float(s) for s in self.step_size],
            "accept_stat": [float(s) for s in self.accept_stat],
            "mean_leapfrog": [float(s) for s in self.mean_leapfrog],
            "params": list(self.params),
            "shapes": {k: list(v.shape[2:]) for k, v in self.draws.items()},
        }

    def to_csv(self, path: str | Path) -> list[Path]:
        """Columnar ``chain,iter,name,value`` CSV plus a ``.json`` metadata sidecar; returns both paths."""
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            fh.write("chain,iter,name,value\n")
            for q in self.quantities():
                a = self.quantity(q)
                for c in range(a.shape[0]):
                    fh.writelines(f"{c},{s},{q},{v!r}\n" for s, v in enumerate(a[c].tolist()))
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return [path, sidecar]

    @classmethod
    def from_csv(cls, path: str | Path) -> "DrawMatrix":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        c, s = meta["chains"], meta["iterations"]
        draws = {k: np.empty((c, s) + tuple(shape)) for k, shape in meta["shapes"].items()}
        with path.open(encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                chain, it, q, v = line.rstrip("\n").split(",", 3) if "[" not in line else _split_row(line)
                name, _, rest = q.partition("[")
                idx = tuple(int(t) for t in rest[:-1].split(",")) if rest else ()
                draws[name][(int(chain), int(it)) + idx] = float(v)
        return cls(
            draws=draws,
            seed=meta["seed"],
            divergences=meta["divergences"],
            warmup_divergences=meta["warmup_divergences"],
            step_size=np.array(meta["step_size"]),
            accept_stat=np.array(meta["accept_stat"]),
            mean_leapfrog=np.array(meta["mean_leapfrog"]),
            params=tuple(meta["params"]),
        )


def _split_row(line: str):
    chain, it, rest = line.rstrip("\n").split(",", 2)
    q, v = rest.rsplit(",", 1)
    return chain, it, q, v


def check_gradient(model: LogDensityModel, point: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    The step for coordinate ``k`` is ``eps * max(1, |x_k|)``; the error of each
    coordinate is scaled by ``max(1, |analytic|, |numeric|)``.
    """
    x = np.asarray(point, dtype=float).reshape(-1)
    lp, g = model.logp_grad(x[None, :])
    if not np.isfinite(lp[0]):
        raise ValueError("log density is not finite at the check point")
    g = g[0]
    h = eps * np.maximum(1.0, np.abs(x))
    stencil = np.repeat(x[None, :], 2 * x.size, axis=0)
    k = np.arange(x.size)
    stencil[2 * k, k] += h
    stencil[2 * k + 1, k] -= h
    vals, _ = model.logp_grad(stencil) if model.n_data == 1 else _rowwise(model, stencil)
    if not np.all(np.isfinite(vals)):
        raise ValueError("log density is not finite inside the difference stencil")
    fd = (vals[0::2] - vals[1::2]) / (2 * h)
    err = np.abs(g - fd) / np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))
    return float(err.max())


def _rowwise(model, x):
    lp = np.empty(x.shape[0])
    g = np.empty_like(x)
    for r in range(x.shape[0]):
        lp[r : r + 1], g[r : r + 1] = model.logp_grad(x[r : r + 1])
    return lp, g


def sample(model: LogDensityModel, cfg: SamplerConfig | None = None) -> DrawMatrix:
    if model.n_data != 1:
        raise ValueError("model binds several datasets; use sample_batch")
    return sample_batch(model, cfg)[0]


WORKERS_ENV = "LOSSFLOW_WORKERS"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1")
    return n


def sample_batch(model: LogDensityModel, cfg: SamplerConfig | None = None, workers: int | None = None) -> list[DrawMatrix]:
    """Run ``cfg.chains`` chains for every dataset bound to ``model``.

    With ``workers > 1`` the datasets are split into contiguous chunks run in
    separate processes. Streams are keyed by the global dataset index, so the
    draws do not depend on the worker count.
    """
    cfg = cfg or SamplerConfig()
    workers = default_workers() if workers is None else int(workers)
    n_data = model.n_data
    if workers <= 1 or n_data <= 1:
        return _sample_rows(model, cfg, 0)
    bounds = np.linspace(0, n_data, min(workers, n_data) + 1).astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [pool.submit(_sample_rows, model.take(np.arange(a, b)), cfg, a) for a, b in chunks]
        out = []
        for f in futures:
            out.extend(f.result())
    return out


def _sample_rows(model: LogDensityModel, cfg: SamplerConfig, offset: int) -> list[DrawMatrix]:
    n_data, n_chains = model.n_data, cfg.chains
    idx = np.repeat(np.arange(n_data), n_chains)
    bound = model.take(idx)
    rows = len(idx)
    streams = [
        _ChainStream(cfg.seed, offset + int(d), c, model.space.dim)
        for d in range(n_data)
        for c in range(n_chains)
    ]

    x = np.vstack([bound.space.unconstrain(model.init_values(s.rng))[None, :] for s in streams])
    with np.errstate(all="ignore"):
        lp, grad = bound.logp_grad(x)
        for _ in range(100):
            bad = ~(np.isfinite(lp) & np.all(np.isfinite(grad), axis=1))
            if not bad.any():
                break
            for r in np.flatnonzero(bad):
                x[r] = bound.space.unconstrain(model.init_values(streams[r].rng))
            lp, grad = bound.logp_grad(x)
        else:
            raise InitializationError("non-finite log density at initialisation after 100 retries")

    err = check_gradient(bound.take(np.array([0])), x[0])
    if err > cfg.gradient_tol:
        raise GradientCheckError(f"gradient check failed: max relative error {err:.3g}")

    x, lp, grad = _warm_start(bound, x, lp, grad, cfg.init_steps)
    dim = model.space.dim
    inv_metric = np.ones((rows, dim))
    eps = _find_step_size(bound, x, lp, grad, inv_metric, np.ones(rows), streams)
    da = _DualAveraging(eps, cfg.target_accept)
    windows = _adaptation_windows(cfg.warmup)
    welford = _Welford(rows, dim)

    stored = np.empty((rows, cfg.draws, dim))
    accept_sum = np.zeros(rows)
    steps_sum = np.zeros(rows)
    div_warm = np.zeros(rows, dtype=int)
    div_samp = np.zeros(rows, dtype=int)

    total = cfg.warmup + cfg.draws
    for it in range(total):
        warm = it < cfg.warmup
        z, u = _take_randoms(streams, it)
        x, lp, grad, acc, div, nsteps = _hmc_step(bound, x, lp, grad, inv_metric, eps, z, u, cfg)
        if warm:
            div_warm += div
            eps = da.update(acc)
            for start, end in windows:
                if start <= it < end:
                    welford.add(x)
                if it == end - 1:
                    inv_metric = welford.regularised()
                    welford = _Welford(rows, dim)
                    eps = _find_step_size(bound, x, lp, grad, inv_metric, eps, streams)
                    da = _DualAveraging(eps, cfg.target_accept)
            if it == cfg.warmup - 1:
                eps = da.final()
        else:
            s = it - cfg.warmup
            stored[:, s] = x
            div_samp += div
            accept_sum += acc
            steps_sum += nsteps

    flat = stored.reshape(rows * cfg.draws, dim)
    values = bound.space.constrain(flat)
    gen_model = model.take(np.repeat(idx, cfg.draws))
    values.update(gen_model.generated(values))
    out = []
    for d in range(n_data):
        sl = slice(d * n_chains * cfg.draws, (d + 1) * n_chains * cfg.draws)
        rsl = slice(d * n_chains, (d + 1) * n_chains)
        draws = {k: v[sl].reshape((n_chains, cfg.draws) + v.shape[1:]) for k, v in values.items()}
        dm = DrawMatrix(
            draws=draws,
            seed=cfg.seed,
            divergences=int(div_samp[rsl].sum()),
            warmup_divergences=int(div_warm[rsl].sum()),
            step_size=eps[rsl].copy(),
            accept_stat=accept_sum[rsl] / cfg.draws,
            mean_leapfrog=steps_sum[rsl] / cfg.draws,
            params=tuple(model.space.names),
        )
        if dm.divergence_fraction > 0.10:
            logger.warning("dataset %d: %.1f%% divergent transitions", offset + d, 100 * dm.divergence_fraction)
        out.append(dm)
    return out


class _ChainStream:
    """Per-chain Philox stream keyed by (seed, dataset, chain), read in blocks."""

    block = 64

    def __init__(self, seed: int, dataset: int, chain: int, dim: int):
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), dataset, chain])))
        self.dim = dim
        self._start = None
        self._z = self._u = None

    def get(self, it: int):
        if self._start is None or not self._start <= it < self._start + self.block:
            self._start = it - it % self.block
            self._z = self.rng.standard_normal((self.block, self.dim))
            self._u = self.rng.random((self.block, 2))
        k = it - self._start
        return self._z[k], self._u[k]


def _take_randoms(streams, it):
    pairs = [s.get(it) for s in streams]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def _hmc_step(model, x, lp, grad, inv_metric, eps, z, u, cfg):
    rows = x.shape[0]
    p = z / np.sqrt(inv_metric)
    h0 = -lp + 0.5 * np.sum(inv_metric * p * p, axis=1)
    max_steps = np.clip(np.ceil(cfg.path_length / eps), 1, cfg.max_leapfrog).astype(int)
    nsteps = 1 + np.minimum(np.floor(u[:, 0] * max_steps).astype(int), max_steps - 1)
    e = eps[:, None]
    xn, gn, lpn = x.copy(), grad.copy(), lp.copy()
    pn = p + 0.5 * e * gn
    diverged = np.zeros(rows, dtype=bool)
    with np.errstate(all="ignore"):
        for step in range(int(nsteps.max())):
            active = (step < nsteps) & ~diverged
            if not active.any():
                break
            a = active[:, None]
            x_try = np.where(a, xn + e * inv_metric * pn, xn)
            lp_try, g_try = model.logp_grad(x_try)
            p_try = pn + e * g_try
            p_sync = p_try - 0.5 * e * g_try
            h = -lp_try + 0.5 * np.sum(inv_metric * p_sync * p_sync, axis=1)
            bad = active & (~np.isfinite(h) | (h - h0 > 1000.0) | ~np.all(np.isfinite(g_try), axis=1))
            ok = active & ~bad
            o = ok[:, None]
            xn = np.where(o, x_try, xn)
            gn = np.where(o, g_try, gn)
            lpn = np.where(ok, lp_try, lpn)
            pn = np.where(o, p_try, pn)
            diverged |= bad
        pn = pn - 0.5 * e * gn
        h1 = -lpn + 0.5 * np.sum(inv_metric * pn * pn, axis=1)
        acc = np.where(diverged | ~np.isfinite(h1), 0.0, np.minimum(1.0, np.exp(h0 - h1)))
    take = u[:, 1] < acc
    t = take[:, None]
    return (
        np.where(t, xn, x),
        np.where(take, lpn, lp),
        np.where(t, gn, grad),
        acc,
        diverged.astype(int),
        nsteps,
    )


def _warm_start(model, x, lp, grad, steps, lr=0.05):
    """Move each chain uphill with Adam before warmup.

    Prior draws can sit where the gradient is of order 1e5; the first
    trajectories from there fling chains into regions they never leave.
    Steps that do not improve the log density are undone and the chain's
    rate halved, so the result is the best point seen.
    """
    rate = np.full(x.shape[0], lr)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2 = 0.9, 0.999
    with np.errstate(all="ignore"):
        for t in range(1, steps + 1):
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            step = (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + 1e-8)
            x_try = x + rate[:, None] * step
            lp_try, g_try = model.logp_grad(x_try)
            up = np.isfinite(lp_try) & np.all(np.isfinite(g_try), axis=1) & (lp_try > lp)
            u = up[:, None]
            x = np.where(u, x_try, x)
            lp = np.where(up, lp_try, lp)
            grad = np.where(u, g_try, grad)
            m = np.where(u, m, 0.0)
            rate = np.where(up, np.minimum(1.2 * rate, 1.0), 0.5 * rate)
    return x, lp, grad


def _find_step_size(model, x, lp, grad, inv_metric, eps, streams):
    """Double or halve each chain's step size until one leapfrog step's acceptance crosses 0.8."""
    eps = np.array(eps, dtype=float)
    rows = x.shape[0]
    z = np.stack([s.rng.standard_normal(x.shape[1]) for s in streams])
    p = z / np.sqrt(inv_metric)
    h0 = -lp + 0.5 * np.sum(inv_metric * p * p, axis=1)

    def log_accept(e):
        e = e[:, None]
        with np.errstate(all="ignore"):
            pn = p + 0.5 * e * grad
            xn = x + e * inv_metric * pn
            lpn, gn = model.logp_grad(xn)
            pn = pn + 0.5 * e * gn
            h = -lpn + 0.5 * np.sum(inv_metric * pn * pn, axis=1)
        d = h0 - h
        return np.where(np.isfinite(d), d, -np.inf)

    la = log_accept(eps)
    direction = np.where(la > math.log(0.8), 1.0, -1.0)
    done = np.zeros(rows, dtype=bool)
    for _ in range(60):
        trial = eps * 2.0**direction
        la = log_accept(np.where(done, eps, trial))
        crossed = np.where(direction > 0, la <= math.log(0.8), la > math.log(0.8))
        eps = np.where(done, eps, trial)
        done |= crossed | (eps < 1e-12) | (eps > 1e6)
        if done.all():
            break
    return np.clip(eps, 1e-12, 1e6)


class _DualAveraging:
    gamma, t0, kappa = 0.05, 10.0, 0.75

    def __init__(self, eps: np.ndarray, target: float):
        self.mu = np.log(10.0 * eps)
        self.target = target
        self.hbar = np.zeros_like(eps)
        self.log_eps_bar = np.zeros_like(eps)
        self.t = 0

    def update(self, accept: np.ndarray) -> np.ndarray:
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.hbar = (1 - w) * self.hbar + w * (self.target - accept)
        log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.hbar
        k = self.t ** (-self.kappa)
        self.log_eps_bar = k * log_eps + (1 - k) * self.log_eps_bar
        return np.exp(log_eps)

    def final(self) -> np.ndarray:
        return np.exp(self.log_eps_bar)


class _Welford:
    def __init__(self, rows: int, dim: int):
        self.n = 0
        self.mean = np.zeros((rows, dim))
        self.m2 = np.zeros((rows, dim))

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def regularised(self) -> np.ndarray:
        n = self.n
        var = self.m2 / max(n - 1, 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def _adaptation_windows(warmup: int) -> list[tuple[int, int]]:
    """Slow (metric) adaptation windows, Stan's 75/25/50 buffer scheme."""
    if warmup < 20:
        return []
    init, term, base = 75, 50, 25
    if init + term + base > warmup:
        init, term = int(0.15 * warmup), int(0.1 * warmup)
        base = warmup - init - term
    windows = []
    start, size = init, base
    end_slow = warmup - term
    while start < end_slow:
        end = start + size
        if end + 2 * size > end_slow:
            end = end_slow
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


class UndefinedDiagnostic(ValueError):
    """Raised when a diagnostic is undefined, e.g. for constant draws."""


def _split(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] < 2 or a.shape[1] < 4:
        raise ValueError("need at least 2 chains with 4 draws each")
    half = a.shape[1] // 2
    return np.concatenate([a[:, :half], a[:, a.shape[1] - half :]], axis=0)


def _chains(d, quantity):
    return d.quantity(quantity) if isinstance(d, DrawMatrix) else np.asarray(d, dtype=float)


def rhat(d: DrawMatrix | np.ndarray, quantity: str | None = None) -> float:
    """Split-chain potential scale reduction factor."""
    a = _split(_chains(d, quantity))
    n = a.shape[1]
    w = a.var(axis=1, ddof=1).mean()
    if not w > 0:
        raise UndefinedDiagnostic("R-hat undefined: zero within-chain variance")
    b = n * a.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def ess(d: DrawMatrix | np.ndarray, quantity: str | None = None) -> float:
    """Multi-chain effective sample size on split chains (Geyer initial positive sequence)."""
    a = _split(_chains(d, quantity))
    m, n = a.shape
    centered = a - a.mean(axis=1, keepdims=True)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :n] / n
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    if not w > 0:
        raise UndefinedDiagnostic("ESS undefined: zero within-chain variance")
    var_plus = (n - 1) / n * w + a.mean(axis=1).var(ddof=1)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        total += pair
    tau = max(-1.0 + 2.0 * total, 1.0 / math.log10(m * n))
    return float(m * n / tau)


def mcse_mean(d: DrawMatrix | np.ndarray, quantity: str | None = None) -> float:
    a = _chains(d, quantity)
    return float(a.std(ddof=1) / math.sqrt(ess(a)))


def thin(d: DrawMatrix, k: int) -> DrawMatrix:
    """Keep every ``k``-th draw of each chain (draws ``k-1, 2k-1, ...``)."""
    k = int(k)
    if k < 1:
        raise ValueError("stride must be >= 1")
    if k > d.iterations:
        raise ValueError(f"stride {k} exceeds {d.iterations} draws per chain")
    return d.replace_draws({n: a[:, k - 1 :: k] for n, a in d.draws.items()})


def summary(d: DrawMatrix, names: Sequence[str] | None = None) -> list[dict]:
    rows = []
    for q in d.quantities(names if names is not None else list(d.params)):
        a = d.quantity(q)
        row = {"quantity": q, "mean": float(a.mean()), "sd": float(a.std(ddof=1))}
        try:
            row["rhat"] = rhat(a)
            row["ess"] = ess(a)
        except UndefinedDiagnostic:
            row["rhat"] = row["ess"] = float("nan")
        rows.append(row)
    return rows


def max_rhat(d: DrawMatrix, names: Sequence[str] | None = None) -> float:
    worst = 1.0
    for q in d.quantities(names if names is not None else list(d.params)):
        try:
            worst = max(worst, rhat(d.quantity(q)))
        except UndefinedDiagnostic:
            continue
    return worst


def config_dict(cfg: SamplerConfig) -> dict:
    return asdict(cfg)
