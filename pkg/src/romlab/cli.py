"""Command-line front end for the batch pipeline.

Subcommands map one-to-one onto pipeline stages, plus `pipeline` for
the whole chain, `matrix` for the model-comparison table, and `export`
for gnuplot-ready plot data.  Exit codes: 0 success, 2 configuration
error, 3 numerical failure in a required stage, 4 I/O or archive error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .archive import ArchiveError
from .pipeline import STAGES, ConfigError, NumericalError, Pipeline, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _parser():
    parser = argparse.ArgumentParser(
        prog="romlab",
        description="reduced-order flow modeling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = list(STAGES) + ["pipeline", "matrix", "export"]
    for name in commands:
        p = sub.add_parser(name, help=f"run the {name} step")
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--force", action="store_true",
                       help="recompute even if the stage is up to date")
        p.add_argument("--jobs", type=int, default=None,
                       help="worker threads (default: ROMLAB_JOBS or 1)")
        if name == "export":
            p.add_argument("--which", default="all",
                           choices=["all", "errors", "eigen", "ranks"],
                           help="which plot family to export")
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        config = load_config(args.config)
        pipe = Pipeline(config, jobs=args.jobs)
        if args.force:
            # force the addressed stage (all of them for the full chain)
            pipe.force = set(STAGES) if args.command in ("pipeline", "matrix") \
                else {args.command}
        if args.command in STAGES:
            getattr(pipe, args.command)()
        elif args.command == "pipeline":
            pipe.run_all()
        elif args.command == "matrix":
            pipe.matrix()
        else:
            pipe.export(which=args.which)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"error [numerical]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error [numerical]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ArchiveError, OSError) as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
