from __future__ import annotations

import json

import numpy as np
import pytest
import yaml

from ttreliab import pipeline
from ttreliab.cli import main
from ttreliab.config import ConfigError, config_hash, validate


def _cfg(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


LINEAR = {"problem": {"kind": "linear", "dim": 3, "beta": 2.0},
          "dirt": {"n_nodes": 10, "max_rank": 3, "max_sweeps": 2, "gamma_star": 8.0, "n_layers": 2},
          "estimate": {"n_samples": 2000, "mc_samples": 20000}}


def test_stub_mc_gives_one(tmp_path, capsys):
    cfg = _cfg(tmp_path, {"problem": {"kind": "stub", "dim": 2, "stub_performance": -1.0},
                          "estimate": {"mc_samples": 1000}})
    assert main(["estimate", "mc", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "estimate_mc.json").read_text())
    assert rep["p_hat"] == 1.0 and rep["config_hash"]


def test_unknown_key_is_config_error(tmp_path, capsys):
    cfg = _cfg(tmp_path, {"dirt": {"max_rnak": 4}})
    assert main(["estimate", "mc", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
    assert "max_rnak" in capsys.readouterr().err


def test_config_validation():
    with pytest.raises(ConfigError):
        validate({"rve": {"m": 6}})
    with pytest.raises(ConfigError):
        validate({"sensors": {"noise_std": 0.0}})
    with pytest.raises(ConfigError):
        validate({"seed": "zero"})
    a, b = validate({}), validate({"seed": 1})
    assert config_hash(a) == config_hash(validate({})) != config_hash(b)


def test_missing_map_names_producer(tmp_path, capsys):
    cfg = _cfg(tmp_path, LINEAR)
    assert main(["estimate", "is-prior", "--config", cfg, "--out", str(tmp_path / "r")]) == 3
    assert "build-map prior-failure" in capsys.readouterr().err


def test_posterior_map_needs_data(tmp_path, capsys):
    cfg = _cfg(tmp_path, LINEAR)
    assert main(["build-map", "posterior", "--config", cfg, "--out", str(tmp_path / "r")]) == 2


def test_linear_pipeline_is_deterministic(tmp_path):
    cfg = _cfg(tmp_path, LINEAR)
    reports = []
    for k in range(2):
        out = str(tmp_path / f"r{k}")
        assert main(["build-map", "prior-failure", "--config", cfg, "--out", out]) == 0
        assert main(["estimate", "is-prior", "--config", cfg, "--out", out]) == 0
        reports.append((tmp_path / f"r{k}" / "estimate_is-prior.json").read_bytes())
    assert reports[0] == reports[1]
    rep = json.loads(reports[0])
    assert abs(rep["p_hat"] - 0.02275) < 4 * rep["cov"] * 0.02275
    assert rep["n_evals"] > rep["n_samples"]


def test_report_table_and_hash_rejection(tmp_path):
    cfg = _cfg(tmp_path, {"problem": {"kind": "stub", "dim": 2}, "estimate": {"mc_samples": 100}})
    runs = []
    for seed in (1, 2):
        out = tmp_path / f"run{seed}"
        assert main(["estimate", "mc", "--config", cfg, "--out", str(out), "--seed", str(seed)]) == 0
        runs.append(str(out))
    # tamper with one report's hash
    p = tmp_path / "run2" / "estimate_mc.json"
    rep = json.loads(p.read_text())
    rep["config_hash"] = "0" * 64
    p.write_text(json.dumps(rep))
    assert main(["report", *runs, "--out", str(tmp_path / "table")]) == 0
    table = json.loads((tmp_path / "table" / "table.json").read_text())
    assert table["columns"] == ["d", "r", "p_hat", "n_evals", "cov"]
    assert len(table["rows"]) == 1 and table["rejected"] == [str(p)]
    header = (tmp_path / "table" / "table.csv").read_text().splitlines()[0]
    assert header == "run,method,d,r,p_hat,n_evals,cov"


def test_seed_hierarchy(tmp_path):
    run = pipeline.Run(validate({"seed": 7}), tmp_path)
    s = {run.seed(m) for m in pipeline.MODULES}
    assert len(s) == len(pipeline.MODULES)
    assert run.seed("estimate", 1) != run.seed("estimate", 2)
    assert pipeline.Run(validate({"seed": 7}), tmp_path, workers=4).seed("rve-data") == run.seed("rve-data")


def test_plate_pipeline_end_to_end(tmp_path):
    doc = {
        "rve": {"n_records": 12, "resolution": 16},
        "surrogate": {"epochs": 30, "hidden": [8, 8]},
        "fields": {"n_terms": 2},
        "truth": {"resolution": 8},
        "threshold": {"n_calibration": 100, "target_pf": 0.1},
        "dirt": {"n_nodes": 6, "max_rank": 2, "init_rank": 1, "enrichment_rank": 1, "max_sweeps": 1,
                 "gamma_star": 200.0, "n_layers": 2},
        "estimate": {"n_samples": 100, "n_proposals": 200, "batch": 100, "n_boot": 50},
    }
    cfg = _cfg(tmp_path, doc)
    out = str(tmp_path / "run")
    assert main(["synthesize-truth", "--config", cfg, "--out", out]) == 3
    for cmd in (["rve-data"], ["train-surrogate"], ["kl-build"], ["validate-surrogate"],
                ["synthesize-truth"],
                ["build-map", "posterior"], ["build-map", "posterior-failure"],
                ["estimate", "posterior-ratio"], ["estimate", "rejection-reference"]):
        assert main([*cmd, "--config", cfg, "--out", out]) == 0, cmd
    man = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert {"rve-data", "estimate posterior-ratio"} <= set(man["steps"])
    rep = json.loads((tmp_path / "run" / "estimate_posterior-ratio.json").read_text())
    assert rep["d"] == 6 and 0.0 <= rep["p_hat"] <= 1.0
    val = json.loads((tmp_path / "run" / "surrogate_validation.json").read_text())
    assert len(val["r2"]) == 10 and val["displacement_rel_l2"] >= 0.0
    # a map from another configuration is refused
    cfg2 = _cfg(tmp_path, {**doc, "seed": 5}, "cfg2.yaml")
    assert main(["estimate", "posterior-ratio", "--config", cfg2, "--out", out]) == 3
