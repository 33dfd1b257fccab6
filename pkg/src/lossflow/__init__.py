"""Bayesian loss development, forecasting, backtesting and stacking for casualty triangles."""

from .backtest import BacktestConfig, ScoreTable, elpd_and_diff, make_split, run_backtest
from .cashflow import cashflow_summary, walkback
from .development import DevConfig, UltimateSummary, fit_development, simulate_development
from .forecasting import (
    HierarchicalConfig,
    MeasurementErrorInput,
    Program,
    fit_forecast,
    fit_hierarchical,
    forecast,
    lognormal_moment_match,
)
from .inference import DrawMatrix, ParameterSpace, SamplerConfig, sample, sample_batch
from .stacking import StackInput, StackWeights, blend, fit_stack
from .triangle import Triangle, load_triangles, to_runoff
from .validation import SbcConfig, predictive_check, rank_statistic, run_sbc, uniform_band

__version__ = "0.1.0"

__all__ = [
    "BacktestConfig",
    "DevConfig",
    "DrawMatrix",
    "HierarchicalConfig",
    "MeasurementErrorInput",
    "ParameterSpace",
    "Program",
    "SamplerConfig",
    "SbcConfig",
    "ScoreTable",
    "StackInput",
    "StackWeights",
    "Triangle",
    "UltimateSummary",
    "blend",
    "cashflow_summary",
    "elpd_and_diff",
    "fit_development",
    "fit_forecast",
    "fit_hierarchical",
    "fit_stack",
    "forecast",
    "load_triangles",
    "lognormal_moment_match",
    "make_split",
    "predictive_check",
    "rank_statistic",
    "run_backtest",
    "run_sbc",
    "sample",
    "sample_batch",
    "simulate_development",
    "to_runoff",
    "uniform_band",
    "walkback",
]
