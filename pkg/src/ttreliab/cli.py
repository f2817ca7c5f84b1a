"""Command-line entry point: ``ttreliab <command> --config FILE [--out DIR] [--seed N] [--workers N]``.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .artifacts import ArtifactError
from .config import DEFAULTS, ConfigError, load_config, validate

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttreliab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        sp.add_argument("--out", default="run", help="run directory (default: ./run)")
        sp.add_argument("--seed", type=int, help="root seed; overrides the config value")
        sp.add_argument("--workers", type=int, default=1, help="worker processes for RVE solves")
        return sp

    add("rve-data", "generate the homogenization dataset")
    add("train-surrogate", "train the bound-constrained network")
    add("validate-surrogate", "validation R^2, bound enclosure and macro field comparison")
    add("kl-build", "mesh the plate and build the KL bases")
    add("synthesize-truth", "ground truth, noisy observations and threshold calibration")
    add("build-map", "build a deep transport map").add_argument("kind", choices=pipeline.MAP_KINDS)
    add("estimate", "estimate a failure probability").add_argument("method",
                                                                     choices=pipeline.ESTIMATORS)
    rp = add("report", "aggregate estimate reports into a table")
    rp.add_argument("runs", nargs="*", help="run directories (default: --out)")
    sub.add_parser("show-config", help="print the default configuration")
    return p


def _run(args) -> int:
    if args.command == "show-config":
        print(json.dumps(DEFAULTS, indent=2))
        return EXIT_OK
    cfg = load_config(args.config) if args.config else validate({})
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be nonnegative")
        cfg["seed"] = args.seed
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    if args.command == "report":
        table = pipeline.report(args.runs or [args.out], args.out)
        print(f"{len(table['rows'])} rows, {len(table['rejected'])} rejected")
        return EXIT_OK
    run = pipeline.Run(cfg, args.out, args.workers)
    if args.command == "rve-data":
        ds = pipeline.rve_data(run)
        print(f"{len(ds)} records written")
    elif args.command == "train-surrogate":
        _, hist = pipeline.train_surrogate(run)
        print(f"best epoch {hist.best_epoch}")
    elif args.command == "validate-surrogate":
        print(json.dumps(pipeline.validate_surrogate(run), indent=2))
    elif args.command == "kl-build":
        bases = pipeline.kl_build(run)
        print("energy fractions " + " ".join(f"{b.energy_fraction:.4f}" for b in bases))
    elif args.command == "synthesize-truth":
        print(f"sigma_allow {pipeline.synthesize_truth(run)['sigma_allow']:.6g} MPa")
    elif args.command == "build-map":
        t = pipeline.build_map(run, args.kind)
        print(f"{t.n_layers} layers, {t.n_model_evals} model evaluations")
    elif args.command == "estimate":
        rep = pipeline.estimate(run, args.method)
        print(f"p_hat {rep['p_hat']} cov {rep['cov']} evals {rep['n_evals']}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except pipeline.DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ConfigError, ArtifactError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError, __import__("numpy").linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
