"""Command line interface: ``kdereplay run <config.json> [--out DIR] [--jobs N]
[--validate-only]``.

Exit codes: 0 success, 1 runtime failure, 2 config-schema violation.
"""

import argparse
import sys
import traceback

from .experiment import ConfigError, load_config, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kdereplay",
        description="Continual-learning experiments with KDE-based generative latent replay",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_parser = sub.add_parser("run", help="execute an experiment config")
    run_parser.add_argument("config", help="path to the experiment JSON config")
    run_parser.add_argument("--out", default=None, help="output directory for reports")
    run_parser.add_argument("--jobs", type=int, default=1,
                            help="parallel worker processes across independent cells")
    run_parser.add_argument("--validate-only", action="store_true",
                            help="validate the config and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command != "run":  # pragma: no cover - argparse enforces this
        return 2
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    n_cells = len(config.strategies) * len(config.sequences) * len(config.seeds)
    if args.validate_only:
        print(f"config OK: {n_cells} cells "
              f"({len(config.strategies)} strategies x {len(config.sequences)} sequences "
              f"x {len(config.seeds)} seeds)")
        return 0
    try:
        report = run_experiment(args.config, out_dir=args.out, jobs=args.jobs)
    except Exception:
        traceback.print_exc()
        print("error: experiment run failed", file=sys.stderr)
        return 1
    print(f"completed {len(report['cells'])} cells in {report['total_seconds']:.1f}s")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
