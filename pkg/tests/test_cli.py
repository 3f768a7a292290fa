import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from blocgravity.cli import main
from blocgravity.output import read_table

HERE = Path(__file__).parent
FIXTURE = HERE / "fixtures" / "ingest"
GOLDEN = HERE / "golden"

SYNTH = {"n_east": 3, "n_west": 3, "n_rest": 2, "years": [1950, 1969], "theta": {"IC": -1.5},
         "noise": "multiplicative", "noise_sd": 0.2}


def run(*args):
    return main([str(a) for a in args])


def write_config(path: Path, **extra):
    cfg = {"paths": {"panel": "out/panel.csv", "design": "out/design.csv", "aux": "out/aux.csv",
                     "taxonomy": "out/taxonomy.csv"},
           "synth": SYNTH, "seed": 3}
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return path


def header(path: Path) -> str:
    first = path.read_text().splitlines()[0]
    if path.suffix == ".json":
        return json.loads(path.read_text())["config_hash"]
    if path.suffix == ".svg":
        return path.read_text().split("<!-- config-hash:")[1].split("-->")[0].strip()
    assert first.startswith("# config-hash: ")
    return first.split(": ", 1)[1]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    assert run("synth", "--config", cfg) == 0
    est = root / "est"
    assert run("estimate", "--config", cfg, "--out", est) == 0
    assert run("simulate", "--config", cfg, "--out", est) == 0
    return root, cfg, est


def test_ingest_matches_golden(tmp_path):
    assert run("ingest", "--config", FIXTURE / "config.json", "--out", tmp_path) == 0
    assert (tmp_path / "panel.csv").read_bytes() == (GOLDEN / "ingest_panel.csv").read_bytes()
    assert (tmp_path / "flow_imputed.csv").read_bytes() == (GOLDEN / "ingest_imputed.csv").read_bytes()
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["config_hash"] == header(tmp_path / "panel.csv")
    assert (tmp_path / "diagnostics.txt").read_text().startswith("# config-hash: ")


def test_missing_rate_file_names_it(tmp_path, capsys):
    for f in FIXTURE.iterdir():
        shutil.copy(f, tmp_path)
    (tmp_path / "rates.csv").unlink()
    code = run("ingest", "--config", tmp_path / "config.json", "--out", tmp_path / "out")
    assert code != 0
    assert "rates.csv" in capsys.readouterr().err


def test_empty_raw_gives_empty_panel(tmp_path, caplog):
    for name in ("rates.csv", "usd_to_gbp.csv"):
        shutil.copy(FIXTURE / name, tmp_path)
    header_line = (FIXTURE / "raw.csv").read_text().splitlines()[0]
    (tmp_path / "raw.csv").write_text(header_line + "\n")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"paths": {"raw": "raw.csv", "rates": "rates.csv", "usd_to_gbp": "usd_to_gbp.csv"}}))
    with caplog.at_level("WARNING", logger="blocgravity"):
        assert run("ingest", "--config", cfg, "--out", tmp_path / "out") == 0
    assert "empty" in caplog.text
    assert len(read_table(tmp_path / "out" / "panel.csv")) == 0


def test_missing_config_and_bad_flags(tmp_path, capsys):
    assert run("estimate", "--config", tmp_path / "nope.json") == 2
    assert "nope.json" in capsys.readouterr().err
    cfg = write_config(tmp_path / "cfg.json")
    assert run("synth", "--config", cfg, "--epsilon", "-1") == 2
    assert run("synth", "--config", cfg, "--years", "1960:1950") == 2
    assert run("synth", "--config", cfg, "--years", "1960") == 2
    with pytest.raises(SystemExit):
        run("synth", "--taxonomy-variant", "other")


def test_estimate_outputs(pipeline):
    _, _, est = pipeline
    coef = read_table(est / "coefficients.csv")
    assert list(coef.columns) == ["label", "year", "estimate", "std_error"]
    ic = coef[coef["label"] == "IC"]
    assert len(ic) == 20
    assert abs(ic["estimate"].mean() + 1.5) < 0.3
    te = read_table(est / "tariff_equivalents.csv")
    assert set(te["label"]) == {"border", "IC"}
    wald = read_table(est / "wald.csv")
    assert list(wald[["group_a", "group_b"]].iloc[0]) == ["1950-1959", "1960-1969"]
    assert (est / "te_IC.svg").exists()
    diag = json.loads((est / "estimate_diagnostics.json").read_text())
    assert diag["converged"] and diag["include_domestic"]


def test_no_domestic_changes_estimates(pipeline, tmp_path):
    _, cfg, est = pipeline
    assert run("estimate", "--config", cfg, "--no-domestic", "--out", tmp_path) == 0
    diag = json.loads((tmp_path / "estimate_diagnostics.json").read_text())
    assert diag["include_domestic"] is False
    # without domestic pairs every observation crosses a border, so the border terms are absorbed
    assert {d["term"].split("[")[0] for d in diag["dropped"]} == {"border"}
    a, b = read_table(est / "coefficients.csv"), read_table(tmp_path / "coefficients.csv")
    a, b = a[a["label"] == "IC"], b[b["label"] == "IC"]
    assert len(a) == len(b) == 20
    assert not np.allclose(a["estimate"], b["estimate"])
    assert header(tmp_path / "coefficients.csv") != header(est / "coefficients.csv")


def test_four_bloc_gives_four_series(pipeline, tmp_path):
    root, _, _ = pipeline
    cfg = write_config(tmp_path / "cfg.json", model={"dummies": "four_bloc"})
    cfg_data = json.loads(cfg.read_text())
    cfg_data["paths"] = {k: str(root / v) for k, v in cfg_data["paths"].items()}
    cfg.write_text(json.dumps(cfg_data))
    assert run("estimate", "--config", cfg, "--out", tmp_path / "out", "--years", "1950:1954") == 0
    te = read_table(tmp_path / "out" / "tariff_equivalents.csv")
    assert set(te["label"]) == {"border", "EW", "WE", "EE", "WW"}
    assert (te.groupby("label").size() == 5).all()


def test_simulate_outputs(pipeline):
    _, _, est = pipeline
    summary = read_table(est / "summary.csv")
    assert len(summary) == 20
    assert (summary["interbloc_pct"] > 0).all()
    assert (summary["east_median_welfare_pct"] > 0).all()
    conv = read_table(est / "convergence.csv")
    assert (conv["status"] == "ok").all() and (conv["residual"] < 1e-10).all()
    countries = read_table(est / "countries.csv")
    assert set(countries.columns) == {"year", "country", "p_hat", "P_hat", "w_hat", "W_hat_pct", "group"}
    flows = read_table(est / "flows.csv")
    tot = flows.groupby("year")[["X_actual", "X_cf"]].sum()
    assert (tot["X_cf"] > 0).all()


def test_every_output_carries_the_hash(pipeline):
    root, _, est = pipeline
    for d in (root / "out", est):
        hashes = {header(p) for p in sorted(d.iterdir())}
        assert len(hashes) == 1
        assert len(next(iter(hashes))) == 16


def test_years_without_estimates_are_skipped(pipeline, tmp_path):
    _, cfg, est = pipeline
    te = read_table(est / "tariff_equivalents.csv")
    te = te[te["year"] != 1955]
    (tmp_path / "te.csv").write_text(te.to_csv(index=False))
    data = json.loads(cfg.read_text())
    data["paths"] = {k: str(cfg.parent / v) for k, v in data["paths"].items()}
    data["paths"]["estimates"] = str(tmp_path / "te.csv")
    (tmp_path / "cfg.json").write_text(json.dumps(data))
    assert run("simulate", "--config", tmp_path / "cfg.json", "--out", tmp_path / "out") == 0
    conv = read_table(tmp_path / "out" / "convergence.csv").set_index("year")
    assert conv.loc[1955, "status"] == "skipped"
    assert (conv.drop(1955)["status"] == "ok").all()
    assert 1955 not in set(read_table(tmp_path / "out" / "summary.csv")["year"])


def test_no_shock_gives_zero_changes(pipeline, tmp_path):
    _, cfg, _ = pipeline
    assert run("simulate", "--config", cfg, "--no-shock", "--out", tmp_path) == 0
    summary = read_table(tmp_path / "summary.csv")
    cols = ["interbloc_pct", "world_pct", "east_median_welfare_pct", "east_weighted_welfare_pct"]
    assert np.abs(summary[cols].to_numpy()).max() < 1e-10


def test_missing_estimates_reported(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    assert run("synth", "--config", cfg) == 0
    assert run("simulate", "--config", cfg, "--out", tmp_path / "empty") == 2
    assert "tariff_equivalents.csv" in capsys.readouterr().err


def test_runs_are_byte_identical(pipeline, tmp_path):
    _, cfg, est = pipeline
    again = tmp_path / "again"
    assert run("estimate", "--config", cfg, "--out", again) == 0
    assert run("simulate", "--config", cfg, "--out", again) == 0
    names = sorted(p.name for p in est.iterdir())
    assert names == sorted(p.name for p in again.iterdir())
    for n in names:
        assert (est / n).read_bytes() == (again / n).read_bytes(), n


def test_log_level_from_environment(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    cmd = [sys.executable, "-m", "blocgravity.cli", "synth", "--config", str(cfg)]
    quiet = subprocess.run(cmd, capture_output=True, text=True, env={**os.environ, "BLOCGRAVITY_LOG_LEVEL": "ERROR"})
    loud = subprocess.run(cmd, capture_output=True, text=True, env={**os.environ, "BLOCGRAVITY_LOG_LEVEL": "INFO"})
    assert quiet.returncode == loud.returncode == 0
    assert "INFO" not in quiet.stderr
    assert "INFO blocgravity" in loud.stderr


def test_seed_changes_synthetic_panel(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    assert run("synth", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("synth", "--config", cfg, "--out", tmp_path / "b", "--seed", "4") == 0
    a, b = read_table(tmp_path / "a" / "panel.csv"), read_table(tmp_path / "b" / "panel.csv")
    assert not np.allclose(a["value"], b["value"])
    truth = read_table(tmp_path / "a" / "truth.csv")
    assert (truth["theta"] == -1.5).all() and len(truth) == 20
    assert isinstance(pd.read_csv(tmp_path / "a" / "taxonomy.csv", comment="#"), pd.DataFrame)
