"""Command-line entry point: ``policy-its {simulate,fit,effects,sensitivity,validate}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import load_config
from .errors import ConvergenceError, OracleDisagreement, PolicyITSError, ValidationError
from . import pipeline

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_ORACLE = 4

log = logging.getLogger("policy_its")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="policy-its",
        description="Bayesian interrupted-time-series evaluation of staggered policy rollouts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "generate a synthetic dataset from the config's scenario",
        "fit": "fit the model and write a posterior artifact",
        "effects": "summarize a posterior artifact into effect tables",
        "sensitivity": "fit and summarize every intervention definition",
        "validate": "compare the Laplace fit against the MCMC sampler",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--draws", type=int, help="override the number of posterior draws")
        p.add_argument("--threshold-pct", type=float,
                       help="use the awareness definition at this percentage")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "effects":
            p.add_argument("--artifact", help="posterior artifact (default: the config's fit)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "draws": args.draws,
                                        "threshold_pct": args.threshold_pct, "out": args.out})
        if args.command == "simulate":
            paths = pipeline.run_simulate(cfg)
            for p in paths.values():
                print(p)
        elif args.command == "fit":
            _, path = pipeline.run_fit(cfg, reuse=False)
            print(path)
        elif args.command == "effects":
            print(pipeline.run_effects(cfg, args.artifact))
        elif args.command == "sensitivity":
            print(pipeline.run_sensitivity(cfg))
        elif args.command == "validate":
            table = pipeline.run_validate(cfg)
            print(f"oracle agreement: max standardized difference {table['std_diff'].max():.3f}")
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OracleDisagreement as exc:
        print(f"oracle disagreement: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except ConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except PolicyITSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
