"""Command-line entry point: ``lossflow <command> --config run.json``.

Each command writes into ``<output>/<command>/`` and finishes with a
``manifest.json`` that records the merged config, its hash, the seed, library
versions and the sha256 of every file written. Passing that manifest back as
``--config`` reruns the command with identical settings.

Exit codes: 0 success, 1 invalid config or missing inputs, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from collections import defaultdict
from importlib import resources
from pathlib import Path

import numpy as np

from .backtest import (
    BacktestError,
    ScoreTable,
    _reseed,
    calibration_bands,
    make_split,
    pairwise_comparisons,
    run_backtest,
)
from .cashflow import CashflowError, cashflow_summary, walkback, write_paths, write_summary
from .config import ConfigError, RunConfig, load_config
from .development import (
    DevelopmentError,
    _prepare as _prepare_dev,
    development_factors,
    fit_development,
    read_ultimates,
    simulate_development,
    write_ultimate_draws,
    write_ultimates,
)
from .forecasting import (
    ForecastDraws,
    ForecastError,
    ForecastPriors,
    HierarchicalConfig,
    MeasurementErrorInput,
    Program,
    fit_forecast,
    fit_hierarchical,
    forecast,
    program_draws,
    write_forecast_draws,
)
from .inference import WORKERS_ENV, DrawMatrix, GradientCheckError, InitializationError, max_rhat
from .stacking import StackingError, StackInput, StackWeights, blend, blended_lpd, fit_stack, stacking_objective
from .triangle import Triangle, TriangleError, group_by_line, load_triangles, to_runoff, write_triangles
from .validation import ValidationError, predictive_check, run_sbc

logger = logging.getLogger("lossflow")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("develop", "forecast", "sbc", "backtest", "stack", "cashflow")
MANIFEST = "manifest.json"


class MissingDependencyError(Exception):
    """An upstream command's outputs are absent."""


INVALID = (ConfigError, TriangleError, MissingDependencyError)
RUNTIME = (
    DevelopmentError,
    ForecastError,
    BacktestError,
    StackingError,
    CashflowError,
    ValidationError,
    GradientCheckError,
    InitializationError,
)


# ---------------------------------------------------------------------------
# output bookkeeping


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict[str, str]:
    import matplotlib
    import pydantic
    import scipy

    from . import __version__

    return {
        "lossflow": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
        "pydantic": pydantic.__version__,
    }


class RunDir:
    """Output directory of one command; tracks files for the manifest."""

    def __init__(self, root: str | Path, command: str):
        self.command = command
        self.path = Path(root) / command
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []
        self.inputs: dict[str, str] = {}
        self.extra: dict = {}

    def file(self, name: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def add(self, paths) -> None:
        self.files.extend(Path(p) for p in paths)

    def uses(self, path: Path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def finish(self, cfg: RunConfig) -> Path:
        files = {p.relative_to(self.path).as_posix(): sha256_file(p) for p in sorted(set(self.files))}
        manifest = {
            "kind": "lossflow-manifest",
            "command": self.command,
            "config": cfg.to_dict(),
            "config_sha256": cfg.digest(),
            "seed": cfg.seed,
            "versions": _versions(),
            "inputs": self.inputs,
            "files": files,
            **self.extra,
        }
        p = self.path / MANIFEST
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(*paths: Path) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise MissingDependencyError("missing upstream output(s): " + ", ".join(missing))


def sample_corpus_path() -> Path:
    return Path(str(resources.files("lossflow") / "data" / "sample_corpus.csv"))


def _corpus(cfg: RunConfig, run: RunDir) -> list[Triangle]:
    path = Path(cfg.input) if cfg.input else sample_corpus_path()
    if not path.exists():
        raise ConfigError(f"input corpus not found: {path}")
    run.uses(path)
    return load_triangles(path)


# ---------------------------------------------------------------------------
# develop


def cmd_develop(cfg: RunConfig) -> int:
    run = RunDir(cfg.output, "develop")
    corpus = _corpus(cfg, run)
    fitted, cfgs, failures = [], [], {}
    for t in corpus:
        ft = to_runoff(t) if cfg.develop.runoff and t.is_full_square else t
        dc = cfg.dev_config(t.line, ft.n_dev_lags)
        try:
            _prepare_dev([ft], [dc])
        except DevelopmentError as exc:
            failures[t.id] = str(exc)
            continue
        fitted.append(ft)
        cfgs.append(dc)
    if not fitted:
        raise DevelopmentError("no triangle could be prepared for fitting")

    fits = fit_development(fitted, cfgs, cfg.dev_sampler.build(cfg.seed))
    summaries, factor_rows, convergence, checks = [], [], [], {}
    kept = []
    for k, (t, dc, (body, tail)) in enumerate(zip(fitted, cfgs, fits)):
        rng = np.random.default_rng([cfg.seed, 1, k])
        try:
            summaries.append(simulate_development(body, tail, t, dc, rng))
            factors = development_factors(body, tail, dc, t.n_dev_lags)
        except DevelopmentError as exc:
            failures[t.id] = str(exc)
            continue
        kept.append(t)
        for d in range(factors.shape[0]):
            for j in range(factors.shape[1]):
                factor_rows.append((t.id, d, t.dev_lags[j], repr(float(factors[d, j]))))
        convergence.append(
            {
                "triangle_id": t.id,
                "line": t.line,
                "tau": dc.tau,
                "rho": list(dc.rho),
                "max_rhat_body": max_rhat(body),
                "max_rhat_tail": max_rhat(tail),
                "divergences_body": body.divergences,
                "divergences_tail": tail.divergences,
            }
        )
        run.add(body.to_csv(run.file(f"draws/{t.id}_body.csv")))
        run.add(tail.to_csv(run.file(f"draws/{t.id}_tail.csv")))
        if cfg.develop.predictive_checks:
            pc = predictive_check(t, dc, np.random.default_rng([cfg.seed, 4, k]), "posterior", (body, tail))
            run.add(pc.write(run.path / "checks"))
            checks[t.id] = {str(lv): cov for lv, cov in pc.coverage.items()}
            if cfg.figures:
                from .plotting import predictive_overlay

                predictive_overlay(pc, run.file(f"figures/ppc_{t.id}.png"))

    write_triangles(run.file("triangles.csv"), kept)
    write_ultimates(run.file("ultimates.csv"), summaries)
    write_ultimate_draws(run.file("ultimate_draws.csv"), summaries)
    with run.file("factor_draws.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("triangle_id", "draw", "dev_lag", "factor"))
        w.writerows(factor_rows)
    _write_json(run.file("convergence.json"), {"triangles": convergence, "failures": failures, "coverage": checks})

    lines = sorted({t.line for t in corpus})
    run.extra["priors"] = {
        line: cfg.dev_config(line, max(t.n_dev_lags for t in corpus if t.line == line)).prior_table() for line in lines
    }
    run.extra["prior_scale"] = cfg.prior_scale
    run.extra["failures"] = failures
    run.finish(cfg)
    for tid, msg in failures.items():
        logger.error("%s: %s", tid, msg)
    return EXIT_RUNTIME if failures else EXIT_OK


# ---------------------------------------------------------------------------
# forecast


def _future_labels(t: Triangle, horizon: int) -> list:
    years = t.accident_years
    if all(isinstance(y, (int, np.integer)) for y in years):
        return [int(years[-1]) + h for h in range(1, horizon + 1)]
    n = t.n_accident_years
    return [n + h for h in range(1, horizon + 1)]


def _me_prior(cfg: RunConfig, ratios: list[float]):
    value = cfg.me_prior_value()
    if value is None:
        return None
    if value == "auto":
        r = np.asarray(ratios, dtype=float)
        if r.size < 2:
            logger.warning("auto measurement-error prior needs two or more triangles per line; skipping it")
            return None
        return float(r.mean()), float(r.std(ddof=1))
    return value


def _load_stack_weights(path: Path) -> dict[str, StackWeights]:
    data = json.loads(path.read_text(encoding="utf-8"))
    return {
        line: StackWeights(v["weights"], v["objective"], v["iterations"], v["converged"])
        for line, v in data["lines"].items()
    }


def cmd_forecast(cfg: RunConfig) -> int:
    root = Path(cfg.output)
    dev_dir = root / "develop"
    _require(dev_dir / MANIFEST, dev_dir / "ultimates.csv", dev_dir / "triangles.csv")
    run = RunDir(root, "forecast")
    for name in ("ultimates.csv", "triangles.csv"):
        run.uses(dev_dir / name)
    triangles = {t.id: t for t in load_triangles(dev_dir / "triangles.csv")}
    ults = read_ultimates(dev_dir / "ultimates.csv")
    missing = [tid for tid in triangles if tid not in ults]
    if missing:
        raise MissingDependencyError(f"no developed ultimates for {', '.join(missing)}")

    by_line = group_by_line(triangles.values())
    programs: dict[str, list[Program]] = {}
    me_priors = {}
    for line, ts in by_line.items():
        # first accident year is fully developed and stands in for an observed ultimate
        prior = _me_prior(cfg, [ults[t.id]["mean"][0] for t in ts])
        me_priors[line] = prior
        programs[line] = [
            Program(t.id, MeasurementErrorInput(ults[t.id]["mean"], ults[t.id]["sd"], *(prior or (None, None))), t.premiums)
            for t in ts
        ]

    h = cfg.forecast.horizon
    g = cfg.forecast.premium_growth
    premium_rows, convergence, outputs = [], [], {}
    futures = {}
    for t in triangles.values():
        prem = t.premiums[-1] * (1.0 + g) ** np.arange(1, h + 1)
        futures[t.id] = prem
        for ay, p in zip(_future_labels(t, h), prem):
            premium_rows.append((t.id, ay, repr(float(p))))
    ordered = [tid for line in by_line for tid in (t.id for t in by_line[line])]

    for m_idx, kind in enumerate(cfg.models.forecasters()):
        sampler = _reseed(cfg.forecast_sampler.build(cfg.seed), cfg.seed, 2 + m_idx)
        per_program: dict[str, DrawMatrix] = {}
        pooled = [line for line in by_line if cfg.hierarchical and len(programs[line]) >= 2]
        if pooled:
            fits = fit_hierarchical([programs[line] for line in pooled], HierarchicalConfig(kind=kind, prior_scale=cfg.prior_scale), sampler)
            for line, fh in zip(pooled, fits):
                run.add(fh.to_csv(run.file(f"fits/{kind}_{line}.csv")))
                convergence.append({"model": kind, "line": line, "max_rhat": max_rhat(fh, [q for q in fh.params if q in fh.draws]), "divergences": fh.divergences})
                for gi, p in enumerate(programs[line]):
                    per_program[p.id] = program_draws(fh, gi)
        single = [p for line in by_line if line not in pooled for p in programs[line]]
        if single:
            for p, dm in zip(single, fit_forecast(single, kind, cfg.prior_scale, sampler=sampler)):
                run.add(dm.to_csv(run.file(f"fits/{kind}_{p.id}.csv")))
                convergence.append({"model": kind, "triangle_id": p.id, "max_rhat": max_rhat(dm), "divergences": dm.divergences})
                per_program[p.id] = dm
        rows = []
        for k, tid in enumerate(ordered):
            rng = np.random.default_rng([cfg.seed, 5, m_idx, k])
            rows.append((tid, _future_labels(triangles[tid], h), forecast(per_program[tid], h, futures[tid], rng)))
        outputs[kind] = rows
        write_forecast_draws(run.file(f"forecast_draws_{kind}.csv"), rows)

    stack_note = "disabled"
    if cfg.models.stack:
        wpath = root / "stack" / "weights.json"
        if wpath.exists():
            run.uses(wpath)
            weights = _load_stack_weights(wpath)
            rows = []
            for k, tid in enumerate(ordered):
                line = triangles[tid].line
                if line not in weights:
                    raise MissingDependencyError(f"stack weights have no entry for line {line}")
                draws = {kind: dict((r[0], r[2]) for r in outputs[kind])[tid] for kind in outputs}
                rng = np.random.default_rng([cfg.seed, 6, k])
                ratios = blend(weights[line], {m: d.loss_ratio for m, d in draws.items()}, rng)
                fd = ForecastDraws(loss_ratio=ratios, loss=ratios * futures[tid][None, :], premiums=futures[tid])
                rows.append((tid, _future_labels(triangles[tid], h), fd))
            write_forecast_draws(run.file("forecast_draws_stack.csv"), rows)
            stack_note = "blended"
        else:
            stack_note = "skipped: run `lossflow stack` first"
            logger.warning("no stack weights at %s; stacked forecast not written", wpath)

    with run.file("future_premiums.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("triangle_id", "accident_year", "premium"))
        w.writerows(premium_rows)
    _write_json(run.file("convergence.json"), {"fits": convergence, "me_priors": me_priors})
    run.extra["stack"] = stack_note
    run.extra["priors"] = {k: list(v) for k, v in ForecastPriors().scaled(cfg.prior_scale).items()}
    run.finish(cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sbc


def cmd_sbc(cfg: RunConfig) -> int:
    run = RunDir(cfg.output, "sbc")
    report = run_sbc(cfg.sbc_config())
    run.add(report.write(run.path))
    if cfg.figures:
        from .plotting import predictive_overlay, rank_histograms

        rank_histograms(report, run.file("figures/rank_histograms.png"))
    if cfg.sbc.predictive_check and cfg.sbc.family == "dev":
        # prior predictive replicates of the corpus triangles, no fitting involved
        for k, t in enumerate(_corpus(cfg, run)):
            ft = to_runoff(t) if t.is_full_square else t
            dc = cfg.dev_config(t.line, ft.n_dev_lags)
            pc = predictive_check(ft, dc, np.random.default_rng([cfg.seed, 7, k]), "prior")
            run.add(pc.write(run.path / "checks"))
            if cfg.figures:
                predictive_overlay(pc, run.file(f"figures/prior_{t.id}.png"))
    run.extra["sbc"] = {
        "fraction_within_one_violation": report.fraction_within(1),
        "max_violations": report.max_violations,
        "excluded": len(report.excluded),
        "unreliable": report.unreliable,
    }
    run.finish(cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# backtest


def _check_backtest_corpus(corpus: list[Triangle], cfg: RunConfig) -> None:
    for line, ts in group_by_line(corpus).items():
        if len(ts) < 2:
            raise ConfigError(f"line {line}: backtest needs at least two triangles, got {len(ts)}")
        for t in ts:
            make_split(t, cfg.backtest.test_rows)
            cfg.dev_config(line, t.n_dev_lags)


def cmd_backtest(cfg: RunConfig) -> int:
    run = RunDir(cfg.output, "backtest")
    corpus = _corpus(cfg, run)
    try:
        _check_backtest_corpus(corpus, cfg)
    except BacktestError as exc:
        raise ConfigError(str(exc)) from None
    res = run_backtest(corpus, cfg.backtest_config())
    res.scores.to_csv(run.file("scores.csv"))
    elpd: dict = defaultdict(dict)
    for m in res.scores.models:
        for split in ("test", "validation"):
            elpd[m][split] = {"all": res.scores.elpd(m, split), **{ln: res.scores.elpd(m, split, ln) for ln in res.scores.lines}}
    comparison = {
        "elpd": elpd,
        "pairwise": {split: pairwise_comparisons(res.scores, split) for split in ("test", "validation")},
        "calibration": {split: calibration_bands(res.scores, split) for split in ("test", "validation")},
    }
    _write_json(run.file("comparison.json"), comparison)
    _write_json(
        run.file("diagnostics.json"),
        {"fits": res.diagnostics, "failures": res.failures, "me_priors": res.me_priors},
    )
    write_ultimates(run.file("ultimates.csv"), list(res.ultimates.values()))
    for m in res.scores.models:
        with run.file(f"predictive_{m}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("triangle_id", "accident_year", "draw", "loss_ratio"))
            for tid in res.splits:
                if (m, tid) not in res.predictive:
                    continue
                pred = res.predictive[(m, tid)]
                years = res.splits[tid].full.accident_years
                for i in range(pred.shape[1]):
                    w.writerows((tid, years[i], d, repr(float(v))) for d, v in enumerate(pred[:, i].tolist()))
    for (m, key), dm in res.forecast_draws.items():
        run.add(dm.to_csv(run.file(f"fits/{m}_{key}.csv")))
    if cfg.figures:
        from .plotting import calibration_histograms

        for split in ("test", "validation"):
            calibration_histograms(
                {m: res.scores.percentiles(m, split) for m in res.scores.models},
                run.file(f"figures/calibration_{split}.png"),
            )
    run.extra["failures"] = res.failures
    run.finish(cfg)
    for tid, msg in res.failures.items():
        logger.error("%s: %s", tid, msg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# stack


def _read_predictive(path: Path) -> dict[str, dict]:
    out: dict[str, dict] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            d = out.setdefault(row["triangle_id"], {})
            d.setdefault(row["accident_year"], []).append(float(row["loss_ratio"]))
    return out


def cmd_stack(cfg: RunConfig) -> int:
    if not cfg.models.stack:
        raise ConfigError("models.stack is false; nothing to stack")
    root = Path(cfg.output)
    bt = root / "backtest"
    _require(bt / MANIFEST, bt / "scores.csv")
    run = RunDir(root, "stack")
    run.uses(bt / "scores.csv")
    scores = ScoreTable.from_csv(bt / "scores.csv")
    models = list(cfg.models.forecasters())
    absent = [m for m in models if m not in scores.models]
    if absent:
        raise MissingDependencyError(f"backtest scores lack model(s) {', '.join(absent)}")

    report, stacked_rows = {}, []
    fitted: dict[str, StackWeights] = {}
    for line in scores.lines:
        keys, mat = scores.lpd_matrix(models, "test", line)
        data = StackInput(mat, tuple(models), tuple(f"{a}|{b}" for a, b in keys))
        w = fit_stack(data, cfg.stack.tol, cfg.stack.max_iter)
        fitted[line] = w
        vkeys, vmat = scores.lpd_matrix(models, "validation", line)
        blended = blended_lpd(w, vmat, models)
        for (tid, ay), v in zip(vkeys, blended.tolist()):
            stacked_rows.append((line, tid, ay, repr(float(v))))
        report[line] = {
            "weights": w.weights,
            "objective": w.objective,
            "iterations": w.iterations,
            "converged": w.converged,
            "dropped": list(data.dropped),
            "single_model_objective": {m: stacking_objective(data.lpd, np.eye(len(models))[k]) for k, m in enumerate(models)},
            "uniform_objective": stacking_objective(data.lpd, np.full(len(models), 1.0 / len(models))),
            "validation_elpd": {"stack": float(blended.sum()), **{m: float(vmat[:, k].sum()) for k, m in enumerate(models)}},
        }
    _write_json(run.file("weights.json"), {"models": models, "split": "test", "lines": report})
    with run.file("stacked_scores.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("line", "triangle_id", "accident_year", "lpd"))
        w.writerows(stacked_rows)

    pred_files = {m: bt / f"predictive_{m}.csv" for m in models}
    if all(p.exists() for p in pred_files.values()):
        preds = {m: _read_predictive(p) for m, p in pred_files.items()}
        line_of = {r.triangle_id: r.line for r in scores.rows}
        with run.file("blended_draws.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("triangle_id", "accident_year", "draw", "loss_ratio"))
            for k, tid in enumerate(sorted(preds[models[0]])):
                years = list(preds[models[0]][tid])
                per_model = {m: np.array([preds[m][tid][y] for y in years]).T for m in models}
                rng = np.random.default_rng([cfg.seed, 8, k])
                mixed = blend(fitted[line_of[tid]], per_model, rng)
                for i, ay in enumerate(years):
                    w.writerows((tid, ay, d, repr(float(v))) for d, v in enumerate(mixed[:, i].tolist()))
    run.finish(cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# cashflow


def _read_forecast_draws(path: Path) -> dict[str, tuple[list, np.ndarray]]:
    raw: dict[str, dict] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            raw.setdefault(row["triangle_id"], {}).setdefault(row["accident_year"], []).append(float(row["loss"]))
    return {tid: (list(d), np.array(list(d.values())).T) for tid, d in raw.items()}


def _read_factors(path: Path) -> dict[str, tuple[list, np.ndarray]]:
    raw: dict[str, dict] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            raw.setdefault(row["triangle_id"], {}).setdefault(row["dev_lag"], []).append(float(row["factor"]))
    return {tid: (list(d), np.array(list(d.values())).T) for tid, d in raw.items()}


def cmd_cashflow(cfg: RunConfig) -> int:
    root = Path(cfg.output)
    model = cfg.cashflow.model
    fc = root / "forecast" / f"forecast_draws_{model}.csv"
    prem_path = root / "forecast" / "future_premiums.csv"
    fac = root / "develop" / "factor_draws.csv"
    tri = root / "develop" / "triangles.csv"
    _require(fc, prem_path, fac, tri)
    run = RunDir(root, "cashflow")
    for p in (fc, prem_path, fac, tri):
        run.uses(p)
    ults = _read_forecast_draws(fc)
    factors = _read_factors(fac)
    triangles = {t.id: t for t in load_triangles(tri)}
    premiums: dict[str, list[float]] = defaultdict(list)
    with prem_path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            premiums[row["triangle_id"]].append(float(row["premium"]))

    all_paths, summaries = [], []
    for tid, (years, u) in ults.items():
        if tid not in factors:
            raise MissingDependencyError(f"no development factor draws for {tid}")
        _, f = factors[tid]
        n = cfg.cashflow.draws
        if n is None:
            if u.shape[0] != f.shape[0]:
                raise ConfigError(
                    f"{tid}: {u.shape[0]} ultimate draws but {f.shape[0]} factor draws; set cashflow.draws to pair the first n of each"
                )
            n = u.shape[0]
        if n > min(u.shape[0], f.shape[0]):
            raise ConfigError(f"{tid}: cashflow.draws={n} exceeds the available draws ({u.shape[0]}, {f.shape[0]})")
        t = triangles[tid]
        years = [int(y) if y.lstrip("-").isdigit() else y for y in years]
        paths = walkback(
            u[:n], f[:n], np.array(premiums[tid]), triangle_id=tid, accident_years=tuple(years), dev_lags=t.dev_lags
        )
        all_paths.append(paths)
        s = cashflow_summary(paths, cfg.cashflow.quantiles)
        summaries.append(s)
        if cfg.figures:
            from .plotting import cashflow_fan

            cashflow_fan(s, run.file(f"figures/cashflow_{tid}.png"))
    write_paths(run.file("cashflow_paths.csv"), all_paths)
    write_summary(run.file("cashflow_summary.csv"), summaries)
    run.finish(cfg)
    return EXIT_OK


HANDLERS = {
    "develop": cmd_develop,
    "forecast": cmd_forecast,
    "sbc": cmd_sbc,
    "backtest": cmd_backtest,
    "stack": cmd_stack,
    "cashflow": cmd_cashflow,
}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lossflow", description="Bayesian loss development, forecasting and backtesting.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="run config JSON, or a manifest.json from an earlier run")
    parser.add_argument("--input", help="triangle corpus CSV (default: bundled sample corpus)")
    parser.add_argument("--output", help="output root directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--prior-scale", type=float, help="multiply every prior SD (0.5, 1 or 2)")
    parser.add_argument("--horizon", type=int, help="forecast horizon in accident years")
    parser.add_argument("--no-figures", action="store_true", help="write CSV/JSON only")
    parser.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set sbc.n_sims=100 (VALUE is JSON)")
    parser.add_argument("--print-config", action="store_true", help="print the merged config and exit")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    for flag, key in (("input", "input"), ("output", "output"), ("seed", "seed"), ("prior_scale", "prior_scale"), ("horizon", "forecast.horizon")):
        value = getattr(args, flag)
        if value is not None:
            out[key] = value
    if args.no_figures:
        out["figures"] = False
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            os.environ[WORKERS_ENV] = str(args.workers)
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.merged(_overrides(args))
        if args.print_config:
            sys.stdout.write(cfg.to_json())
            return EXIT_OK
        code = HANDLERS[args.command](cfg)
    except INVALID as exc:
        print(f"lossflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RUNTIME as exc:
        print(f"lossflow {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        if WORKERS_ENV in str(exc):
            print(f"lossflow {args.command}: error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        logger.debug("unexpected error", exc_info=True)
        print(f"lossflow {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(cfg.output) / args.command
    print(f"lossflow {args.command}: outputs in {out}" + (" (with failures)" if code else ""))
    return code


if __name__ == "__main__":
    sys.exit(main())
