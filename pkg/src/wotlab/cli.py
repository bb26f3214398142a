"""Command line: ``wotlab <subcommand> --config <path> [--seed N] [--out DIR] [--dry-run] [--only NAME]``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

SUBCOMMANDS = ("toy1d", "toy2d", "fake_demo", "gamma_sweep", "dwot_solve", "checks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wotlab", description="Weak optimal transport experiments.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="TOML experiment config (optional for 'checks')")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    parser.add_argument("--only", help="run a single suite/check ('checks') or a single named run ('fake_demo')")
    return parser


def _resolve(args):
    from .experiments import ConfigError, ExperimentConfig, load_config

    if args.config is None:
        if args.subcommand != "checks":
            raise ConfigError(f"'{args.subcommand}' needs --config")
        config = ExperimentConfig("checks")
    else:
        config = load_config(args.config)
    if config.experiment != args.subcommand:
        raise ConfigError(f"config is for '{config.experiment}', not '{args.subcommand}'")
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # imported here so that --help stays fast
    from threadpoolctl import threadpool_limits

    from .experiments import ConfigError, run_experiment, threads_from_env

    try:
        threads = threads_from_env()
        config = _resolve(args)
        if args.dry_run:
            print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
            return 0
        with threadpool_limits(limits=threads):
            report = run_experiment(config, only=args.only)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"{report.experiment}: {report.status} ({report.wall_time:.1f} s) -> {config.out_dir}")
    for name, value in sorted(report.metrics.items()):
        print(f"  {name} = {value:.6g}")
    for note in report.details.get("failures", []):
        print(f"  FAILED: {note}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
