"""Workflow steps behind the command-line interface.

Each step reads its inputs from the run directory, writes its outputs
atomically and records itself in ``manifest.json``. A step whose input is
missing raises :class:`DependencyError` naming the command that produces it.

Seeds are derived from the root seed by ``numpy.random.SeedSequence`` spawn
keys ``(module, worker)``, so a step's randomness does not depend on which
other steps ran or on the number of workers.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, artifacts
from .config import ConfigError, config_hash, problem_dim
from .dirt import BridgingSchedule, build
from .estimators import (ReliabilityProblem, is_posterior_ratio, is_prior, linear_problem, mc_prior,
                         rejection_posterior_reference)
from .macrofem import (LoadCase, Mesh, PlateModel, SensorSet, assemble_solve, direct_stiffness,
                       generate_plate_mesh, write_results)
from .micromech import RVEDataset, generate_dataset, homogenize, plane_stress_condense
from .randfield import CovarianceKernel, KLBasis, LognormalMarginal, kl_decompose, lumped_weights
from .surrogate import VRNN, TrainingConfig, r2_per_component, train
from .tt import CrossConfig

logger = logging.getLogger(__name__)

FIELD_NAMES = ("v_f", "E_f", "E_m")
MODULES = {"rve-data": 0, "train-surrogate": 1, "kl-build": 2, "validate-surrogate": 3,
           "synthesize-truth": 4, "build-map": 5, "estimate": 6}
MAP_KINDS = ("posterior", "prior-failure", "posterior-failure")
ESTIMATORS = ("mc", "is-prior", "posterior-ratio", "rejection-reference")
TABLE_COLUMNS = ("d", "r", "p_hat", "n_evals", "cov")
# config sections each artifact depends on; upstream artifacts are checked against these
DEPENDS = {
    "kl.bin": ("plate", "fields"),
    "truth.bin": ("seed", "rve", "surrogate", "plate", "fields", "sensors", "truth", "threshold"),
    "map": ("seed", "problem", "rve", "surrogate", "plate", "fields", "sensors", "truth",
            "threshold", "dirt"),
}


class DependencyError(RuntimeError):
    def __init__(self, artifact: str, command: str):
        super().__init__(f"missing {artifact}; run `ttreliab {command}` first")
        self.artifact = artifact
        self.command = command


@dataclass
class Run:
    """A run directory bound to one validated configuration."""

    cfg: dict
    out: Path
    workers: int = 1

    def __post_init__(self):
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(self.cfg)

    @property
    def dim(self) -> int:
        return problem_dim(self.cfg)

    def seed(self, module: str, worker: int = 0) -> int:
        ss = np.random.SeedSequence(self.cfg["seed"], spawn_key=(MODULES[module], worker))
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str, command: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DependencyError(name, command)
        return p

    def record(self, command: str, outputs: list[str], **info) -> None:
        man_path = self.path("manifest.json")
        man = json.loads(man_path.read_text()) if man_path.exists() else {}
        if man.get("config_hash", self.hash) != self.hash:
            # a different configuration owned this directory; start over
            man = {}
        man.update({"config_hash": self.hash, "seed": self.cfg["seed"], "version": __version__,
                    "format_version": artifacts.FORMAT_VERSION})
        man.setdefault("steps", {})[command] = {"outputs": outputs, **info}
        artifacts.atomic_write_text(man_path, json.dumps(man, indent=2, sort_keys=True) + "\n")

    def section_hash(self, artifact: str) -> str:
        return config_hash({k: self.cfg[k] for k in DEPENDS[artifact]})

    def meta(self, artifact: str | None = None, **extra) -> dict:
        out = {"config_hash": self.hash, "seed": self.cfg["seed"], "version": __version__, **extra}
        if artifact is not None:
            out["inputs_hash"] = self.section_hash(artifact)
        return out


def _load_checked(run: Run, name: str, kind: str, command: str):
    """Load an artifact and insist its configuration inputs match this run."""
    arrays, meta = artifacts.load(run.require(name, command), kind)
    if meta.get("inputs_hash") != run.section_hash(name):
        raise DependencyError(f"{name} (built with another configuration)", command)
    return arrays, meta


def _ranges(cfg) -> tuple:
    return tuple(tuple(cfg["rve"][k]) for k in FIELD_NAMES)


# -- micromechanics and surrogate --------------------------------------------------


def rve_data(run: Run) -> RVEDataset:
    c = run.cfg["rve"]
    ds = generate_dataset(c["n_records"], _ranges(run.cfg), c["resolution"], run.seed("rve-data"),
                          c["m"], c["nu_f"], c["nu_m"], c["train_fraction"], run.workers)
    ds.save(run.path("dataset.txt"))
    hm = float(np.max(ds.hill_mandel)) if ds.hill_mandel.size else math.nan
    run.record("rve-data", ["dataset.txt"], n_records=len(ds), max_hill_mandel=hm)
    return ds


def train_surrogate(run: Run):
    ds = RVEDataset.load(run.require("dataset.txt", "rve-data"))
    c = run.cfg["surrogate"]
    tc = TrainingConfig(c["learning_rate"], c["weight_decay"], c["epochs"], run.seed("train-surrogate"),
                        tuple(c["hidden"]), final_lr_ratio=c["final_lr_ratio"], log_every=c["log_every"])
    net, hist = train(ds, tc, _ranges(run.cfg))
    net.save(run.path("surrogate.bin"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train", "validation"])
    val = hist.validation if len(hist.validation) else [math.nan] * len(hist.train)
    for k, (a, b) in enumerate(zip(hist.train, val)):
        w.writerow([k + 1, repr(float(a)), repr(float(b))])
    artifacts.atomic_write_text(run.path("history.csv"), buf.getvalue())
    run.record("train-surrogate", ["surrogate.bin", "history.csv"], best_epoch=hist.best_epoch)
    return net, hist


def load_surrogate(run: Run) -> VRNN:
    return VRNN.load(run.require("surrogate.bin", "train-surrogate"))


# -- random fields and the plate -------------------------------------------------


def plate_mesh(cfg) -> Mesh:
    p = cfg["plate"]
    return generate_plate_mesh(p["width"], p["height"], p["hole_radius"], p["refinement"])


def kl_build(run: Run) -> list[KLBasis]:
    cfg = run.cfg
    mesh = plate_mesh(cfg)
    mesh.save(run.path("mesh.txt"))
    coords = mesh.nodes / cfg["plate"]["width"]
    w = lumped_weights(coords, mesh.elements)
    f = cfg["fields"]
    bases = []
    arrays = {"nodes": coords, "weights": w}
    for name in FIELD_NAMES:
        mg = LognormalMarginal(f[name]["mean"], f[name]["cv"])
        kern = CovarianceKernel(f["kernel"], mg.sigma_g, f["ell"])
        b = kl_decompose(coords, kern, f["n_terms"], w, mg)
        bases.append(b)
        arrays[f"{name}.eigenvalues"] = b.eigenvalues
        arrays[f"{name}.eigenvectors"] = b.eigenvectors
        arrays[f"{name}.trace"] = np.array(b.trace)
    artifacts.save(run.path("kl.bin"), "kl-bases", arrays,
                   run.meta("kl.bin", fields=f, energy=[b.energy_fraction for b in bases]))
    run.record("kl-build", ["mesh.txt", "kl.bin"], energy=[b.energy_fraction for b in bases])
    return bases


def load_kl(run: Run) -> tuple[Mesh, list[KLBasis]]:
    arrays, meta = _load_checked(run, "kl.bin", "kl-bases", "kl-build")
    mesh = Mesh.load(run.require("mesh.txt", "kl-build"))
    f = meta["fields"]
    bases = []
    for name in FIELD_NAMES:
        mg = LognormalMarginal(f[name]["mean"], f[name]["cv"])
        kern = CovarianceKernel(f["kernel"], mg.sigma_g, f["ell"])
        bases.append(KLBasis(arrays["nodes"], arrays["weights"], arrays[f"{name}.eigenvalues"],
                             arrays[f"{name}.eigenvectors"], float(arrays[f"{name}.trace"]), kern, mg))
    return mesh, bases


def sensors(cfg) -> SensorSet:
    s, p = cfg["sensors"], cfg["plate"]
    if s["points"] is not None:
        return SensorSet(np.asarray(s["points"], dtype=float), s["noise_std"])
    return SensorSet.ring_and_far_field(p["width"], p["height"], p["hole_radius"], s["n_ring"],
                                        s["ring_factor"], s["noise_std"])


def load_case(cfg) -> LoadCase:
    p = cfg["plate"]
    return LoadCase(p["force"], p["thickness"], p["support"])


def plate_model(run: Run, stiffness=None, sigma_allow: float = 1.0, y_obs=None) -> PlateModel:
    mesh, bases = load_kl(run)
    stiffness = load_surrogate(run).predict if stiffness is None else stiffness
    return PlateModel(mesh, load_case(run.cfg), sensors(run.cfg), bases, stiffness, sigma_allow,
                      y_obs)


def _direct(run: Run, chi: np.ndarray, resolution: int) -> np.ndarray:
    """Element stiffnesses from RVE solves, spread over the worker pool."""
    c = run.cfg["rve"]
    if run.workers <= 1:
        return direct_stiffness(chi, c["m"], resolution, c["nu_f"], c["nu_m"])
    with concurrent.futures.ProcessPoolExecutor(run.workers) as pool:
        futs = [pool.submit(homogenize, row, c["m"], resolution, c["nu_f"], c["nu_m"]) for row in chi]
        return np.stack([f.result() for f in futs])


def _draw_in_range(model: PlateModel, rng: np.random.Generator, n: int) -> np.ndarray:
    out = np.empty((0, model.dim))
    while out.shape[0] < n:
        x = rng.standard_normal((n - out.shape[0], model.dim))
        out = np.vstack([out, x[model.in_range(x)]])
    return out


def validate_surrogate(run: Run) -> dict:
    """Validation R^2, enclosure on random inputs, and a macro field comparison."""
    net = load_surrogate(run)
    ds = RVEDataset.load(run.require("dataset.txt", "rve-data"))
    idx = ds.val_idx if len(ds.val_idx) else np.arange(len(ds))
    r2 = r2_per_component(net.predict(ds.chi[idx]), ds.C_hom[idx])
    rng = np.random.default_rng(run.seed("validate-surrogate"))
    lo = np.array([r[0] for r in _ranges(run.cfg)])
    hi = np.array([r[1] for r in _ranges(run.cfg)])
    span = hi - lo
    chi = rng.uniform(lo - 0.2 * span, hi + 0.2 * span, (10_000, 3))
    chi[:, 0] = np.clip(chi[:, 0], 0.01, 0.99)
    c_v, c_r, _, _ = net.bounds(chi)
    c = net.predict(chi)
    scale = np.linalg.norm(c_v, 2, axis=(1, 2))
    enclosure = float(min(np.min(np.linalg.eigvalsh(c_v - c)[:, 0] / scale),
                          np.min(np.linalg.eigvalsh(c - c_r)[:, 0] / scale)))
    model = plate_model(run, net.predict)
    xi = _draw_in_range(model, rng, 1)[0]
    chi_e = model.element_chi(xi)
    c_direct = _direct(run, chi_e, run.cfg["rve"]["resolution"])
    load = model.load
    s_sur = assemble_solve(model.mesh, model.element_stiffness(chi_e), load)
    s_dir = assemble_solve(model.mesh, plane_stress_condense(c_direct) if c_direct.shape[-1] == 4
                           else c_direct, load)
    write_results(run.path("appendix_surrogate.csv"), s_sur)
    write_results(run.path("appendix_direct.csv"), s_dir)

    def rel(a, b):
        return float(np.linalg.norm(a - b) / np.linalg.norm(b))

    out = {
        "r2": [None if not np.isfinite(v) else float(v) for v in r2],
        "r2_min": float(np.nanmin(r2)),
        "enclosure_min_eig_rel": enclosure,
        "displacement_rel_l2": rel(s_sur.displacement, s_dir.displacement),
        "von_mises_rel_l2": rel(s_sur.von_mises, s_dir.von_mises),
        "config_hash": run.hash,
    }
    artifacts.atomic_write_text(run.path("surrogate_validation.json"),
                                json.dumps(out, indent=2, sort_keys=True) + "\n")
    run.record("validate-surrogate", ["surrogate_validation.json", "appendix_surrogate.csv",
                                      "appendix_direct.csv"])
    return out


def synthesize_truth(run: Run) -> dict:
    """Ground-truth fields, noisy observations and the calibrated threshold."""
    model = plate_model(run)
    rng = np.random.default_rng(run.seed("synthesize-truth"))
    xi = _draw_in_range(model, rng, 1)[0]
    chi_e = model.element_chi(xi)
    c_true = _direct(run, chi_e, run.cfg["truth"]["resolution"])
    sol = assemble_solve(model.mesh, plane_stress_condense(c_true) if c_true.shape[-1] == 4
                         else c_true, model.load)
    noise = model.sensors.noise_std * rng.standard_normal(2 * len(model.sensors.points))
    y_obs = model.observe(sol) + noise
    t = run.cfg["threshold"]
    n_cal = 0
    f_cal = np.zeros(0)
    if t["sigma_allow"] is None:
        cal_rng = np.random.default_rng(run.seed("synthesize-truth", 1))
        f_cal, _ = model.response(_draw_in_range(model, cal_rng, t["n_calibration"]))
        f_cal = f_cal[np.isfinite(f_cal)]
        sigma_allow = float(np.quantile(f_cal, 1.0 - t["target_pf"]))
        n_cal = f_cal.size
    else:
        sigma_allow = float(t["sigma_allow"])
    artifacts.save(run.path("truth.bin"), "truth",
                   {"xi": xi, "y_obs": y_obs, "chi": chi_e, "F_calibration": f_cal},
                   run.meta("truth.bin", sigma_allow=sigma_allow, F_true=sol.max_von_mises,
                            n_calibration=n_cal, target_pf=t["target_pf"]))
    run.record("synthesize-truth", ["truth.bin"], sigma_allow=sigma_allow)
    return {"sigma_allow": sigma_allow, "y_obs": y_obs, "xi": xi}


# -- reliability -----------------------------------------------------------------


def make_problem(run: Run) -> ReliabilityProblem:
    p = run.cfg["problem"]
    if p["kind"] == "linear":
        return linear_problem(p["dim"], p["beta"])
    if p["kind"] == "stub":
        g = p["stub_performance"]

        def qoi(theta):
            return np.full(np.atleast_2d(theta).shape[0], 1.0 - g)

        return ReliabilityProblem(p["dim"], qoi, 1.0)
    arrays, meta = _load_checked(run, "truth.bin", "truth", "synthesize-truth")
    model = plate_model(run, sigma_allow=meta["sigma_allow"], y_obs=arrays["y_obs"])

    def sample_prior(rng, n):
        return _draw_in_range(model, rng, n)

    return ReliabilityProblem(model.dim, None, meta["sigma_allow"], response=model.response,
                              sample_prior=sample_prior, likelihood_in_response=True)


def cross_config(cfg) -> CrossConfig:
    d = cfg["dirt"]
    return CrossConfig(d["rel_tolerance"], d["max_rank"], d["max_sweeps"], d["enrichment_rank"], 0,
                       d["init_rank"])


def build_map(run: Run, kind: str):
    if kind not in MAP_KINDS:
        raise ConfigError(f"unknown map kind {kind!r}; choose from {MAP_KINDS}")
    problem = make_problem(run)
    d = run.cfg["dirt"]
    gammas = BridgingSchedule.geometric_gammas(d["gamma_star"], d["n_layers"])
    base = None
    if kind == "posterior":
        if not problem.has_likelihood:
            raise ConfigError("posterior maps need a problem with data (problem.kind = plate)")
        sched = (BridgingSchedule("tempering", betas=tuple(d["betas"])) if d["betas"]
                 else BridgingSchedule("tempering", adaptive=True))
    elif kind == "prior-failure":
        sched = BridgingSchedule("smoothed-indicator", gammas=gammas)
        if problem.has_likelihood:
            problem = ReliabilityProblem(problem.dim, None, problem.threshold,
                                         response=_drop_likelihood(problem.response),
                                         sample_prior=problem.sample_prior)
    else:
        base = load_map(run, "posterior")
        sched = BridgingSchedule("combined", betas=tuple(d["betas"]) or (1.0,), gammas=gammas)
    transport = build(problem, sched, cross_config(run.cfg), run.seed("build-map", MAP_KINDS.index(kind)),
                      n_nodes=d["n_nodes"], half_width=d["half_width"], ratio=d["ratio"], base=base,
                      n_ess=0)
    name = f"map_{kind}.bin"
    artifacts.save_map(run.path(name), transport, run.meta("map", kind=kind))
    run.record(f"build-map {kind}", [name], n_model_evals=transport.n_model_evals,
               ranks=[list(q.tt.ranks) for q in transport.layers])
    return transport


def _drop_likelihood(response):
    def f(theta):
        return response(theta)[0], None
    return f


def load_map(run: Run, kind: str):
    name = f"map_{kind}.bin"
    path = run.require(name, f"build-map {kind}")
    _, head = artifacts.load(path, "deep-transport")
    if head["user"].get("inputs_hash") != run.section_hash("map"):
        raise DependencyError(f"{name} (built with another configuration)", f"build-map {kind}")
    return artifacts.load_map(path, dim=run.dim)


def estimate(run: Run, method: str) -> dict:
    if method not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {method!r}; choose from {ESTIMATORS}")
    problem = make_problem(run)
    e = run.cfg["estimate"]
    seed = run.seed("estimate", ESTIMATORS.index(method))
    build_evals = 0
    if method == "mc":
        rep = mc_prior(problem, e["mc_samples"], seed)
    elif method == "is-prior":
        q = load_map(run, "prior-failure")
        build_evals = q.n_model_evals
        rep = is_prior(problem, q, e["n_samples"], seed)
    elif method == "posterior-ratio":
        post = load_map(run, "posterior")
        fail = load_map(run, "posterior-failure")
        build_evals = fail.n_model_evals  # includes the shared posterior layers
        rep = is_posterior_ratio(problem, fail, post, e["n_samples"], seed, n_boot=e["n_boot"])
    else:
        rep = rejection_posterior_reference(problem, e["n_proposals"], e["batch"], seed,
                                            inflation=e["rejection_inflation"])
    out = rep.as_dict()
    out.update({"method": method, "d": problem.dim, "r": run.cfg["dirt"]["max_rank"]
                if method in ("is-prior", "posterior-ratio") else None,
                "n_build_evals": build_evals, "n_evals": build_evals + rep.n_model_evals,
                "config_hash": run.hash, "version": __version__})
    out = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in out.items()}
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    artifacts.atomic_write_text(run.path(f"estimate_{method}.json"), text)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = sorted(out)
    w.writerow(keys)
    w.writerow([out[k] for k in keys])
    artifacts.atomic_write_text(run.path(f"estimate_{method}.csv"), buf.getvalue())
    run.record(f"estimate {method}", [f"estimate_{method}.json", f"estimate_{method}.csv"])
    return out


def report(run_dirs, out: Path) -> dict:
    """Aggregate estimate reports into one table (columns d, r, P, N_evals, CoV).

    A report whose config hash differs from its run's manifest is rejected.
    """
    rows, rejected = [], []
    for rd in map(Path, run_dirs):
        man_path = rd / "manifest.json"
        if not man_path.exists():
            raise DependencyError(f"{man_path}", "estimate")
        man_hash = json.loads(man_path.read_text())["config_hash"]
        for path in sorted(rd.glob("estimate_*.json")):
            rep = json.loads(path.read_text())
            if rep.get("config_hash") != man_hash:
                rejected.append(str(path))
                continue
            rows.append({"run": str(rd), "method": rep["method"], "d": rep["d"], "r": rep["r"],
                         "p_hat": rep["p_hat"], "n_evals": rep["n_evals"], "cov": rep["cov"],
                         "config_hash": rep["config_hash"]})
    if not rows and not rejected:
        raise DependencyError("estimate reports", "estimate")
    table = {"columns": list(TABLE_COLUMNS), "rows": rows, "rejected": rejected}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.atomic_write_text(out / "table.json", json.dumps(table, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "method", *TABLE_COLUMNS])
    for r in rows:
        w.writerow([r["run"], r["method"], *(r[c] for c in TABLE_COLUMNS)])
    artifacts.atomic_write_text(out / "table.csv", buf.getvalue())
    return table
