import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from conftest import square
from lossflow.cli import EXIT_INVALID, EXIT_OK, MANIFEST, main, sha256_file
from lossflow.triangle import write_triangles

SMALL = {"chains": 2, "warmup": 60, "draws": 40}
PIPELINE = ("develop", "backtest", "stack", "forecast", "cashflow")


def tiny_config(root: Path, **extra) -> Path:
    ts = [square(5, seed=s, tid=f"{line}{s}", line=line) for line in ("PP", "WC") for s in range(2)]
    write_triangles(root / "corpus.csv", ts)
    cfg = {
        "input": str(root / "corpus.csv"),
        "output": str(root / "out"),
        "seed": 3,
        "lines": {"PP": {"tau": 3, "rho": [2, 5]}, "WC": {"tau": 3, "rho": [2, 5]}},
        "dev_sampler": SMALL,
        "forecast_sampler": SMALL,
        "forecast": {"horizon": 3},
        **extra,
    }
    path = root / "run.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(root)
    codes = {c: main([c, "--config", str(cfg)]) for c in PIPELINE}
    return root, cfg, codes


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pipeline_succeeds(pipeline):
    _, _, codes = pipeline
    assert codes == {c: EXIT_OK for c in PIPELINE}


def test_one_summary_row_per_accident_year(pipeline):
    root, _, _ = pipeline
    rows = read_csv(root / "out/develop/ultimates.csv")
    assert sorted((r["triangle_id"], r["accident_year"]) for r in rows) == sorted(
        (f"{line}{s}", str(i)) for line in ("PP", "WC") for s in range(2) for i in range(1, 6)
    )


def test_manifests_hash_every_file(pipeline):
    root, _, _ = pipeline
    for c in PIPELINE:
        d = root / "out" / c
        m = json.loads((d / MANIFEST).read_text())
        assert m["command"] == c and m["seed"] == 3
        assert {"numpy", "scipy", "python", "lossflow"} <= set(m["versions"])
        on_disk = {p.relative_to(d).as_posix() for p in d.rglob("*") if p.is_file() and p.name != MANIFEST}
        assert set(m["files"]) == on_disk
        for name, digest in m["files"].items():
            assert sha256_file(d / name) == digest


def test_horizon_three_rows_and_two_archives(pipeline):
    root, _, _ = pipeline
    for kind in ("rw", "mr", "stack"):
        rows = read_csv(root / f"out/forecast/forecast_draws_{kind}.csv")
        years = {(r["triangle_id"], r["accident_year"]) for r in rows}
        assert years == {(f"{line}{s}", str(y)) for line in ("PP", "WC") for s in range(2) for y in (6, 7, 8)}


def test_stack_weights_on_simplex(pipeline):
    root, _, _ = pipeline
    w = json.loads((root / "out/stack/weights.json").read_text())
    assert set(w["lines"]) == {"PP", "WC"}
    for rep in w["lines"].values():
        assert sum(rep["weights"].values()) == pytest.approx(1.0, abs=1e-12)
        assert rep["objective"] >= max(rep["single_model_objective"].values()) - 1e-9


def test_backtest_outputs(pipeline):
    root, _, _ = pipeline
    rows = read_csv(root / "out/backtest/scores.csv")
    assert {r["model"] for r in rows} == {"rw", "mr"}
    assert {r["split"] for r in rows} == {"test", "validation"}
    comp = json.loads((root / "out/backtest/comparison.json").read_text())
    assert set(comp["pairwise"]) == {"test", "validation"}


def test_cashflow_paths_end_at_forecast_losses(pipeline):
    root, _, _ = pipeline
    paths = read_csv(root / "out/cashflow/cashflow_paths.csv")
    last = {(r["triangle_id"], r["accident_year"], int(r["draw"])): float(r["paid_loss"]) for r in paths if r["dev_lag"] == "5"}
    fc = read_csv(root / "out/forecast/forecast_draws_rw.csv")
    for r in fc:
        assert last[(r["triangle_id"], r["accident_year"], int(r["draw"]))] == float(r["loss"])


def test_figures_are_png(pipeline):
    root, _, _ = pipeline
    pngs = list((root / "out").rglob("*.png"))
    assert {p.parent.parent.name for p in pngs} == {"develop", "backtest", "cashflow"}
    for p in pngs:
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_rerun_from_manifest_is_identical(pipeline):
    root, _, _ = pipeline
    for c in ("develop", "cashflow"):
        d = root / "out" / c
        before = json.loads((d / MANIFEST).read_text())["files"]
        assert main([c, "--config", str(d / MANIFEST)]) == EXIT_OK
        after = json.loads((d / MANIFEST).read_text())["files"]
        assert after == before


def test_no_figures(pipeline, tmp_path):
    root, _, _ = pipeline
    out = tmp_path / "out"
    shutil.copytree(root / "out/develop", out / "develop")
    shutil.copytree(root / "out/forecast", out / "forecast")
    assert main(["cashflow", "--config", str(root / "run.json"), "--output", str(out), "--no-figures"]) == EXIT_OK
    assert not list((out / "cashflow").rglob("*.png"))
    assert json.loads((out / "cashflow" / MANIFEST).read_text())["config"]["figures"] is False
    assert (out / "cashflow/cashflow_summary.csv").exists()


def test_prior_scale_doubles_manifest_sds(tmp_path):
    sds = {}
    for k in (1.0, 2.0):
        d = tmp_path / str(k)
        d.mkdir()
        cfg = tiny_config(d, dev_sampler={"chains": 2, "warmup": 30, "draws": 20}, figures=False,
                          develop={"predictive_checks": False})
        assert main(["develop", "--config", str(cfg), "--prior-scale", str(k)]) == EXIT_OK
        m = json.loads((d / "out/develop" / MANIFEST).read_text())
        assert m["prior_scale"] == k
        sds[k] = m["priors"]["PP"]
    for name, row in sds[1.0].items():
        np.testing.assert_allclose(np.asarray(sds[2.0][name]["sd"]), 2.0 * np.asarray(row["sd"]), rtol=1e-12)


@pytest.mark.parametrize(
    "argv",
    [
        ["forecast", "--horizon", "0"],
        ["develop", "--set", 'lines.PP={"tau": 6, "rho": [2, 5]}'],
        ["develop", "--prior-scale", "3"],
        ["develop", "--set", "nonsense=1"],
        ["develop", "--workers", "0"],
        ["stack"],
        ["forecast"],
        ["cashflow"],
    ],
)
def test_invalid_runs_exit_one(tmp_path, argv, capsys):
    cfg = tiny_config(tmp_path)
    assert main(argv + ["--config", str(cfg)]) == EXIT_INVALID
    assert "error" in capsys.readouterr().err


def test_missing_dependency_message(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    main(["stack", "--config", str(cfg)])
    assert "backtest" in capsys.readouterr().err


def test_print_config_via_entry_point(tmp_path):
    cfg = tiny_config(tmp_path)
    out = subprocess.run(
        [sys.executable, "-m", "lossflow", "develop", "--config", str(cfg), "--seed", "9", "--print-config"],
        capture_output=True, text=True, check=True,
    )
    data = json.loads(out.stdout)
    assert data["seed"] == 9 and data["forecast"]["horizon"] == 3


def test_sbc_command(tmp_path):
    small = {"n_sims": 50, "n_accident_years": 5, "n_dev_lags": 5, "tau": 3, "rho": [2, 5],
             "sampler": {"chains": 2, "warmup": 40, "draws": 20}, "thin": 4, "bins": 5}
    cfg = tiny_config(tmp_path, sbc=small)
    assert main(["sbc", "--config", str(cfg)]) == EXIT_OK
    d = tmp_path / "out/sbc"
    m = json.loads((d / MANIFEST).read_text())
    assert "fraction_within_one_violation" in m["sbc"]
    assert (d / "figures/rank_histograms.png").exists()
    assert any(name.startswith("checks/") for name in m["files"])
