"""Command-line entry point.

    specfed run|sweep|ablate|spectrum-probe <config.json> [--seed N] [--workers N] [--out DIR]

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.  The output
directory defaults to ``$SPECFED_OUT``, then to ``output.dir`` in the config.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import experiment
from .config import load_config
from .exceptions import ClientError, ConfigError, SpecfedError

log = logging.getLogger("specfed")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specfed", description="Spectral-prompt federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="client worker threads")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    run = common(sub.add_parser("run", help="train a federation and write CSV/SVG/checkpoint"))
    run.add_argument("--resume", default=None, help="checkpoint to continue from")
    sweep = common(sub.add_parser("sweep", help="one run per lambda or top_k value"))
    sweep.add_argument("--axis", choices=experiment.SWEEP_AXES, required=True)
    sweep.add_argument("--values", type=float, nargs="+", required=True)
    common(sub.add_parser("ablate", help="full pipeline plus four ablation variants"))
    probe = common(sub.add_parser("spectrum-probe", help="cross-modality spectral distance ratios"))
    probe.add_argument("--pairs", type=int, default=None, help="number of pairs (default: data.probe_pairs)")
    probe.add_argument("--include-same", action="store_true", help="also emit same-modality pairs")
    return parser


def _out_dir(args, cfg) -> str:
    return args.out or os.environ.get("SPECFED_OUT") or cfg.output.dir


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1", "--workers")
        out = _out_dir(args, cfg)
        if args.command == "run":
            result = experiment.run_experiment(cfg, out, args.workers, resume=args.resume)
            for name, value in result.final_values().items():
                print(f"{cfg.data.task} {name} {value:.6f}")
        elif args.command == "sweep":
            for v, task, metric, value in experiment.run_sweep(cfg, args.axis, args.values, out, args.workers):
                print(f"{args.axis}={v} {task} {metric} {value:.6f}")
        elif args.command == "ablate":
            for variant, task, metric, value in experiment.run_ablation(cfg, out, args.workers):
                print(f"{variant} {task} {metric} {value:.6f}")
        else:
            _, mean_ratio = experiment.run_spectrum_probe(cfg, out, args.pairs, args.include_same)
            print(f"mean low-pass/full distance ratio: {mean_ratio:.6f}")
    except ConfigError as exc:
        where = f" [{exc.key_path}]" if exc.key_path else ""
        print(f"specfed: config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ClientError as exc:
        print(f"specfed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SpecfedError, OSError, ValueError, ArithmeticError) as exc:
        print(f"specfed: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
