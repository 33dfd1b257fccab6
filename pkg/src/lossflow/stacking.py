"""Single-weight stacking of predictive distributions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

logger = logging.getLogger(__name__)


class StackingError(ValueError):
    pass


@dataclass
class StackInput:
    """Pointwise log predictive densities, rows = datapoints, columns = models."""

    lpd: np.ndarray
    models: tuple[str, ...]
    ids: tuple = ()
    dropped: tuple = field(default=(), init=False)

    def __post_init__(self) -> None:
        lpd = np.asarray(self.lpd, dtype=float)
        self.models = tuple(self.models)
        if lpd.ndim != 2 or lpd.shape[1] != len(self.models):
            raise StackingError("lpd must be (datapoints, models) with one column per model")
        if len(self.models) < 2:
            raise StackingError("stacking needs at least two models")
        if np.any(np.isnan(lpd)) or np.any(lpd == np.inf):
            raise StackingError("lpd contains nan or +inf")
        ids = tuple(self.ids) or tuple(range(lpd.shape[0]))
        all_bad = np.all(lpd == -np.inf, axis=1)
        if all_bad.any():
            self.dropped = tuple(i for i, b in zip(ids, all_bad) if b)
            logger.warning("dropping %d datapoints where every model underflows", int(all_bad.sum()))
        self.lpd = lpd[~all_bad]
        self.ids = tuple(i for i, b in zip(ids, all_bad) if not b)
        if self.lpd.shape[0] == 0:
            raise StackingError("no datapoints left to stack")


@dataclass
class StackWeights:
    weights: dict[str, float]
    objective: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)

    def vector(self, models: Sequence[str]) -> np.ndarray:
        return np.array([self.weights[m] for m in models])


def stacking_objective(lpd: np.ndarray, w: np.ndarray) -> float:
    """``sum_g log sum_k w_k exp(lpd_gk)``."""
    with np.errstate(divide="ignore"):
        return float(np.sum(logsumexp(lpd + np.log(w)[None, :], axis=1)))


def fit_stack(data: StackInput, tol: float = 1e-10, max_iter: int = 10000) -> StackWeights:
    """Maximise the stacked log score over the simplex by EM updates from uniform weights.

    Each update ``w_k <- mean_g w_k p_gk / sum_j w_j p_gj`` never decreases the
    objective. EM crawls when the optimum sits on the simplex boundary, so a
    stalled run that fails the optimality conditions is finished by SLSQP.
    """
    lpd = data.lpd
    k = lpd.shape[1]
    w = np.full(k, 1.0 / k)
    # shift rows for stability; the shift cancels in the responsibilities
    shifted = np.exp(lpd - lpd.max(axis=1, keepdims=True))
    obj = stacking_objective(lpd, w)
    history = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mix = shifted * w[None, :]
        resp = mix / mix.sum(axis=1, keepdims=True)
        w = resp.mean(axis=0)
        new = stacking_objective(lpd, w)
        history.append(new)
        gain = new - obj
        obj = new
        if gain < tol:
            converged = True
            break
    if not converged:
        logger.warning("stacking did not converge in %d iterations", max_iter)
    elif _kkt_gap(shifted, w) > 1e-8:
        polished = _polish(shifted, w)
        polished_obj = stacking_objective(lpd, polished)
        if polished_obj > obj:
            w, obj = polished, polished_obj
            history.append(obj)
    # EM only approaches the boundary; snap vanishing weights when that does not hurt
    small = w < 1e-6
    if small.any() and not small.all():
        snapped = np.where(small, 0.0, w)
        snapped /= snapped.sum()
        snapped_obj = stacking_objective(lpd, snapped)
        if snapped_obj >= obj:
            w, obj = snapped, snapped_obj
            history.append(obj)
    return StackWeights(
        weights={m: float(x) for m, x in zip(data.models, w)},
        objective=obj,
        iterations=it,
        converged=converged,
        history=history,
    )


def _gradient(shifted: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Objective gradient divided by the number of datapoints."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.mean(shifted / (shifted @ w)[:, None], axis=0)


def _kkt_gap(shifted: np.ndarray, w: np.ndarray) -> float:
    # at the optimum every model's scaled gradient is <= 1, with equality where w_k > 0
    g = _gradient(shifted, w)
    return float(np.max(g) - 1.0) if np.all(np.isfinite(g)) else np.inf


def _polish(shifted: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = shifted.shape[0]

    def negative(v):
        mix = np.maximum(shifted @ v, 1e-300)
        return -np.sum(np.log(mix)) / n, -np.mean(shifted / mix[:, None], axis=0)

    res = minimize(
        negative,
        w,
        jac=True,
        method="SLSQP",
        bounds=[(0.0, 1.0)] * w.size,
        constraints=[{"type": "eq", "fun": lambda v: np.sum(v) - 1.0, "jac": lambda v: np.ones_like(v)}],
        options={"ftol": 1e-15, "maxiter": 500},
    )
    v = np.clip(res.x, 0.0, None)
    return v / v.sum()


def blend(weights: StackWeights, draws: dict[str, np.ndarray], rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Mixture draws: pick a model with probability ``w_k``, then one of its draws uniformly.

    ``draws[model]`` has draws along axis 0; the result keeps the trailing shape.
    """
    if set(draws) != set(weights.weights):
        raise StackingError(f"weights for {sorted(weights.weights)} but draws for {sorted(draws)}")
    models = list(weights.weights)
    w = weights.vector(models)
    w = w / w.sum()
    size = size or int(max(np.shape(draws[m])[0] for m in models))
    pick = rng.choice(len(models), size=size, p=w)
    first = np.asarray(draws[models[0]])
    out = np.empty((size,) + first.shape[1:])
    for k, m in enumerate(models):
        rows = np.flatnonzero(pick == k)
        if rows.size:
            src = np.asarray(draws[m])
            out[rows] = src[rng.integers(0, src.shape[0], size=rows.size)]
    return out


def blended_lpd(weights: StackWeights, lpd: np.ndarray, models: Sequence[str]) -> np.ndarray:
    """Pointwise log density of the weighted mixture."""
    with np.errstate(divide="ignore"):
        return logsumexp(np.asarray(lpd) + np.log(weights.vector(models))[None, :], axis=1)
