"""Run configuration shared by every CLI command.

One JSON document drives the whole workflow. Unknown keys are rejected at
every level and parse -> dump -> parse is the identity.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .backtest import DEFAULT_LINES, BacktestConfig, LineConfig
from .development import DevConfig
from .inference import SamplerConfig
from .validation import SbcConfig

PRIOR_SCALES = (0.5, 1.0, 2.0)


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SamplerSettings(_Strict):
    # convergence reports need split R-hat, hence two chains of four draws at least
    chains: int = Field(4, ge=2)
    warmup: int = Field(500, ge=1)
    draws: int = Field(250, ge=4)
    target_accept: float = Field(0.8, gt=0, lt=1)
    max_leapfrog: int = Field(1024, ge=1)
    path_length: float = Field(3.0, gt=0)
    init_steps: int = Field(200, ge=0)

    def build(self, seed: int) -> SamplerConfig:
        return SamplerConfig(seed=seed, **self.model_dump())


class LineSettings(_Strict):
    tau: int = Field(ge=2)
    rho: tuple[int, int]

    @model_validator(mode="after")
    def _check_rho(self):
        if not 2 <= self.rho[0] < self.rho[1]:
            raise ValueError(f"rho={list(self.rho)} needs 2 <= rho1 < rho2")
        return self

    def build(self) -> LineConfig:
        return LineConfig(self.tau, self.rho)


def _default_lines() -> dict[str, LineSettings]:
    return {k: LineSettings(tau=v.tau, rho=v.rho) for k, v in DEFAULT_LINES.items()}


class ModelFlags(_Strict):
    rw: bool = True
    mr: bool = True
    stack: bool = True

    def forecasters(self) -> tuple[str, ...]:
        return tuple(k for k in ("rw", "mr") if getattr(self, k))


class ExplicitPrior(_Strict):
    mean: float = Field(gt=0)
    sd: float = Field(gt=0)


class DevelopSettings(_Strict):
    # cut full-square inputs to their run-off triangle before fitting
    runoff: bool = True
    predictive_checks: bool = True


class ForecastSettings(_Strict):
    horizon: int = Field(1, ge=1)
    # future premiums grow geometrically from the last observed premium
    premium_growth: float = Field(0.0, gt=-1)


class BacktestSettings(_Strict):
    test_rows: Optional[tuple[int, ...]] = None
    max_failure_fraction: float = Field(0.25, ge=0, le=1)


class StackSettings(_Strict):
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(10000, ge=1)


class SbcSettings(_Strict):
    family: Literal["dev", "forecast"] = "dev"
    n_sims: int = Field(200, ge=50)
    n_accident_years: int = Field(8, ge=3)
    n_dev_lags: int = Field(8, ge=3)
    tau: int = 4
    rho: tuple[int, int] = (5, 8)
    forecast_kind: Literal["rw", "mr"] = "rw"
    sampler: SamplerSettings = SamplerSettings(chains=4, warmup=500, draws=250)
    thin: int = Field(10, ge=1)
    bins: int = Field(20, ge=2)
    level: float = Field(0.99, gt=0, lt=1)
    fit_sigma_scale: float = Field(1.0, gt=0)
    predictive_check: bool = True

    @model_validator(mode="after")
    def _check_lags(self):
        if self.family == "dev":
            if self.tau > self.n_dev_lags or self.rho[1] > self.n_dev_lags:
                raise ValueError(f"tau={self.tau}, rho={list(self.rho)} exceed n_dev_lags={self.n_dev_lags}")
            if not 2 <= self.rho[0] < self.rho[1]:
                raise ValueError(f"rho={list(self.rho)} needs 2 <= rho1 < rho2")
        if self.sampler.draws // self.thin < 1:
            raise ValueError("thin exceeds draws per chain")
        return self


class CashflowSettings(_Strict):
    model: Literal["rw", "mr", "stack"] = "rw"
    draws: Optional[int] = Field(None, ge=1)
    quantiles: tuple[float, ...] = (0.05, 0.25, 0.5, 0.75, 0.95)

    @field_validator("quantiles")
    @classmethod
    def _check_quantiles(cls, qs):
        if not qs:
            raise ValueError("at least one quantile is required")
        if any(not 0.0 <= q <= 1.0 for q in qs):
            raise ValueError("quantiles must lie in [0, 1]")
        return qs


class RunConfig(_Strict):
    input: Optional[str] = None
    output: str = "lossflow_out"
    seed: int = Field(0, ge=0)
    prior_scale: float = 1.0
    lines: dict[str, LineSettings] = Field(default_factory=_default_lines)
    dev_sampler: SamplerSettings = SamplerSettings(chains=4, warmup=500, draws=250)
    forecast_sampler: SamplerSettings = SamplerSettings(chains=4, warmup=1000, draws=250)
    models: ModelFlags = ModelFlags()
    hierarchical: bool = True
    me_prior: Union[Literal["auto", "none"], ExplicitPrior] = "auto"
    develop: DevelopSettings = DevelopSettings()
    forecast: ForecastSettings = ForecastSettings()
    backtest: BacktestSettings = BacktestSettings()
    stack: StackSettings = StackSettings()
    sbc: SbcSettings = SbcSettings()
    cashflow: CashflowSettings = CashflowSettings()
    figures: bool = True

    @field_validator("prior_scale")
    @classmethod
    def _check_scale(cls, k):
        if k not in PRIOR_SCALES:
            raise ValueError(f"prior_scale must be one of {PRIOR_SCALES}, got {k}")
        return k

    @model_validator(mode="after")
    def _check_models(self):
        if not self.models.forecasters():
            raise ValueError("enable at least one of models.rw, models.mr")
        if self.models.stack and len(self.models.forecasters()) < 2:
            raise ValueError("models.stack needs both rw and mr")
        return self

    # -- conversions -------------------------------------------------------

    def line_config(self, line: str) -> LineConfig:
        return self.lines[line].build() if line in self.lines else BacktestConfig().line_config(line)

    def dev_config(self, line: str, n_dev_lags: int) -> DevConfig:
        """Per-line development settings; ``tau`` must fit the triangle, ``rho`` is clipped to it."""
        lc = self.line_config(line)
        if lc.tau > n_dev_lags:
            raise ConfigError(f"line {line}: tau={lc.tau} exceeds {n_dev_lags} development lags")
        return lc.dev_config(n_dev_lags, self.prior_scale)

    def me_prior_value(self) -> str | tuple[float, float] | None:
        if self.me_prior == "none":
            return None
        if self.me_prior == "auto":
            return "auto"
        return (self.me_prior.mean, self.me_prior.sd)

    def backtest_config(self) -> BacktestConfig:
        return BacktestConfig(
            models=self.models.forecasters(),
            prior_scale=self.prior_scale,
            dev_sampler=self.dev_sampler.build(self.seed),
            forecast_sampler=self.forecast_sampler.build(self.seed),
            lines={k: v.build() for k, v in self.lines.items()},
            test_rows=self.backtest.test_rows,
            me_prior=self.me_prior_value(),
            hierarchical=self.hierarchical,
            max_failure_fraction=self.backtest.max_failure_fraction,
            seed=self.seed,
        )

    def sbc_config(self) -> SbcConfig:
        s = self.sbc
        return SbcConfig(
            family=s.family,
            n_sims=s.n_sims,
            n_accident_years=s.n_accident_years,
            n_dev_lags=s.n_dev_lags,
            dev=DevConfig(tau=s.tau, rho=s.rho, prior_scale=self.prior_scale),
            forecast_kind=s.forecast_kind,
            sampler=s.sampler.build(self.seed),
            thin=s.thin,
            bins=s.bins,
            level=s.level,
            fit_sigma_scale=s.fit_sigma_scale,
            seed=self.seed,
        )

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def merged(self, overrides: dict) -> "RunConfig":
        """Apply dotted-key overrides such as ``{"forecast.horizon": 3}``."""
        data = self.to_dict()
        for key, value in overrides.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if leaf not in node and not (parents == ["lines"]):
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return parse_config(data)


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            where = ".".join(str(p) for p in err["loc"]) or "<root>"
            problems.append(f"{where}: {err['msg']}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems)) from None


def load_config(path: str | Path) -> RunConfig:
    """Read a config file, or the config recorded in a run manifest."""
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from None
    if isinstance(data, dict) and data.get("kind") == "lossflow-manifest":
        data = data["config"]
    return parse_config(data)
