"""``fedmem`` command line.

Exit codes: 0 success, 1 validation error (bad arguments, config, or input
files), 2 runtime error (training divergence, partition failure, ...).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, parse_config
from .errors import (
    ConfigurationError,
    FedMemError,
    InputError,
    ParseError,
    ReportError,
    SemanticError,
)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigurationError, ParseError, InputError, ReportError, SemanticError, FileNotFoundError)

log = logging.getLogger("fedmem")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; here that is a validation failure
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, master_seed=args.seed)
    return cfg


def cmd_partition(args) -> int:
    from .experiment import build_data

    cfg = _load(args)
    seed = cfg.master_seed
    data = build_data(cfg, seed)
    path = data.shards.save(args.out, cfg.partition_spec(seed))
    print(f"wrote {cfg.clients} shards to {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load(args)
    path = run_experiment(cfg, args.out, workers=args.workers)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import parse_axis_value, sweep

    cfg = _load(args)
    values = [parse_axis_value(args.axis, v) for v in args.values]
    path = sweep(cfg, args.axis, values, args.out, workers=args.workers)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import report

    out = report(args.csv, args.out)
    print(f"wrote report to {out}")
    return EXIT_OK


def cmd_personalize(args) -> int:
    from .experiment import run_seed
    from .numerics import save_params

    cfg = _load(args)
    if "apfl" not in cfg.strategies:
        cfg = replace(cfg, strategies=tuple(cfg.strategies) + ("apfl",))
    res = run_seed(cfg, cfg.master_seed, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, params in sorted(res.personalized.items()):
        save_params(params, out / f"client_{k}.apfl")
    save_params(res.omega, out / "generator.apfl")
    save_params(res.global_params, out / "global.apfl")
    print(f"wrote {len(res.personalized)} personalized models to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedmem", description="Federated learning simulator with generator-based personalization.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_cfg(name, help_, func):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override master_seed")
        sp.set_defaults(func=func)
        return sp

    sp = with_cfg("partition", "write client shards as JSON", cmd_partition)
    sp.add_argument("--out", default="shards.json")

    sp = with_cfg("run", "run an experiment and write metrics CSV", cmd_run)
    sp.add_argument("--out", default="metrics.csv")
    sp.add_argument("--workers", type=int, default=None, help="threads for client training")

    sp = with_cfg("sweep", "run one experiment per axis value", cmd_sweep)
    sp.add_argument("--axis", required=True, choices=["noise_dim", "n_s", "alpha", "beta", "embedding_table"])
    sp.add_argument("--values", nargs="*", required=True)
    sp.add_argument("--out", default="sweep.csv")
    sp.add_argument("--workers", type=int, default=None)

    sp = with_cfg("personalize", "write personalized models for every client", cmd_personalize)
    sp.add_argument("--out", default="personalized")
    sp.add_argument("--workers", type=int, default=None)

    sp = sub.add_parser("report", help="summarize metrics CSVs")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("fedmem: --workers must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"fedmem: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FedMemError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"fedmem: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
