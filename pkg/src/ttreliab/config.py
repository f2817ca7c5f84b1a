"""Run configuration: a YAML document merged onto schema defaults.

Every key must appear in the default tree; unknown keys and values of the
wrong type are rejected with :class:`ConfigError`. ``None`` defaults accept
any value of the listed alternative types.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "problem": {
        "kind": "plate",            # plate | linear | stub
        "dim": 12,                  # linear and stub problems
        "beta": 3.0,                # linear problem reliability index
        "stub_performance": -1.0,   # stub problem: constant g
    },
    "rve": {
        "n_records": 250,
        "resolution": 64,
        "m": 4,
        "nu_f": 0.22,
        "nu_m": 0.35,
        "train_fraction": 0.8,
        "v_f": [0.4, 0.7],
        "E_f": [50.0, 80.0],
        "E_m": [2.0, 5.0],
    },
    "surrogate": {
        "hidden": [64, 64, 64],
        "learning_rate": 1e-4,
        "weight_decay": 1e-4,
        "epochs": 50000,
        "final_lr_ratio": 0.01,
        "log_every": 0,
    },
    "fields": {
        "kernel": "exponential",
        "ell": 0.05,
        "n_terms": 4,
        "v_f": {"mean": 0.55, "cv": 0.05},
        "E_f": {"mean": 65.0, "cv": 0.05},
        "E_m": {"mean": 3.5, "cv": 0.05},
    },
    "plate": {
        "width": 100.0,
        "height": 100.0,
        "hole_radius": 10.0,
        "refinement": 16,
        "thickness": 10.0,
        "force": 1000.0,
        "support": "clamped",
    },
    "sensors": {
        "n_ring": 6,
        "ring_factor": 1.8,
        "points": None,             # explicit [[x, y], ...] overrides the ring layout
        "noise_std": 1e-5,
    },
    "truth": {
        "resolution": 64,
    },
    "threshold": {
        "sigma_allow": None,        # None: calibrate to target_pf
        "target_pf": 5e-3,
        "n_calibration": 20000,
    },
    "dirt": {
        "n_nodes": 12,
        "half_width": 5.0,
        "max_rank": 3,
        "init_rank": 2,
        "enrichment_rank": 1,
        "max_sweeps": 2,
        "rel_tolerance": 1e-2,
        "gamma_star": 4000.0,
        "n_layers": 6,
        "betas": [1.0],
        "ratio": "bridging",
    },
    "estimate": {
        "n_samples": 10000,
        "n_proposals": 100000,
        "mc_samples": 100000,
        "batch": 10000,
        "n_boot": 500,
        "rejection_inflation": 2.0,
    },
}

# keys whose value may be None or a number / list
_NULLABLE = {("sensors", "points"), ("threshold", "sigma_allow")}


def _merge(default, given, path):
    if isinstance(default, dict):
        if not isinstance(given, dict):
            raise ConfigError(f"{'.'.join(path) or 'config'} must be a mapping")
        unknown = sorted(set(given) - set(default))
        if unknown:
            raise ConfigError(f"unknown key(s) {unknown} in {'.'.join(path) or 'config'}")
        return {k: _merge(v, given[k], path + (k,)) if k in given else copy.deepcopy(v)
                for k, v in default.items()}
    name = ".".join(path)
    if tuple(path) in _NULLABLE:
        return given
    if isinstance(default, bool):
        if not isinstance(given, bool):
            raise ConfigError(f"{name} must be a boolean")
        return given
    if isinstance(default, int):
        if isinstance(given, bool) or not isinstance(given, int):
            raise ConfigError(f"{name} must be an integer")
        return given
    if isinstance(default, float):
        if isinstance(given, bool) or not isinstance(given, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(given)
    if isinstance(default, str):
        if not isinstance(given, str):
            raise ConfigError(f"{name} must be a string")
        return given
    if isinstance(default, list):
        if not isinstance(given, list):
            raise ConfigError(f"{name} must be a list")
        return given
    return given


def _check(cfg: dict) -> None:
    if cfg["problem"]["kind"] not in ("plate", "linear", "stub"):
        raise ConfigError("problem.kind must be plate, linear or stub")
    if cfg["rve"]["m"] not in (3, 4):
        raise ConfigError("rve.m must be 3 or 4 (the 3D RVE solve is not available)")
    for key in ("v_f", "E_f", "E_m"):
        lo, hi = cfg["rve"][key]
        if not lo <= hi:
            raise ConfigError(f"rve.{key} range is empty")
    if cfg["sensors"]["noise_std"] <= 0:
        raise ConfigError("sensors.noise_std must be positive")
    if cfg["fields"]["n_terms"] < 1:
        raise ConfigError("fields.n_terms must be positive")
    if cfg["dirt"]["ratio"] not in ("bridging", "exact"):
        raise ConfigError("dirt.ratio must be bridging or exact")
    if cfg["problem"]["dim"] < 1:
        raise ConfigError("problem.dim must be positive")
    sa = cfg["threshold"]["sigma_allow"]
    if sa is not None and (isinstance(sa, bool) or not isinstance(sa, (int, float)) or sa <= 0):
        raise ConfigError("threshold.sigma_allow must be a positive number or null")
    if not 0 < cfg["threshold"]["target_pf"] < 1:
        raise ConfigError("threshold.target_pf must lie in (0, 1)")


def validate(doc: dict | None) -> dict:
    """Merge ``doc`` onto the defaults and validate it."""
    cfg = _merge(DEFAULTS, doc or {}, ())
    _check(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    return validate(doc)


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of a validated config."""
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def problem_dim(cfg: dict) -> int:
    if cfg["problem"]["kind"] == "plate":
        return 3 * cfg["fields"]["n_terms"]
    return cfg["problem"]["dim"]
