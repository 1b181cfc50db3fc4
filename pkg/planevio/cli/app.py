"""Command-line parser, logging setup and the exception-to-exit-code boundary."""

from __future__ import annotations

import argparse
import logging
import sys

from planevio.config import LOG_LEVEL
from planevio.errors import EXIT_OK, PlaneVioError, UsageError
from planevio.cli.commands import cmd_detect, cmd_eval, cmd_experiments, cmd_run, cmd_synth
from planevio.services.evaluation import MAX_DT

logger = logging.getLogger("planevio")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def configure_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else getattr(logging, LOG_LEVEL, logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("planevio")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def create_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="planevio", description="Plane-regularized direct visual-inertial odometry on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--progress", action="store_true", help="progress bars on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a scene bundle")
    p.add_argument("--config", help="experiment config file (defaults: corridor)")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--pgm", action="store_true", help="also dump PGM previews")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("run", help="estimate a trajectory from a bundle")
    p.add_argument("bundle")
    p.add_argument("--config", help="overrides the config stored in the bundle")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("eval", help="align an estimate to ground truth and print metrics")
    p.add_argument("est")
    p.add_argument("gt")
    p.add_argument("--max-dt", type=float, default=MAX_DT, help="association window in seconds")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("detect", help="detect planes on one keyframe of a bundle")
    p.add_argument("bundle")
    p.add_argument("--config", help="overrides the config stored in the bundle")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--ply", help="write the lifted mesh as ASCII PLY")
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("experiments", help="batch experiments")
    p.add_argument("experiment", choices=["ablation", "sweep", "stability"])
    p.add_argument("--config")
    p.add_argument("--runs", type=int, default=20, help="seeds per variant")
    p.add_argument("--windows", type=int, default=30, help="stability sequence length in windows")
    p.add_argument("--out", help="write the full summary JSON here")
    p.add_argument("--record", action="store_true", help="store runs in the experiment database")
    p.set_defaults(handler=cmd_experiments)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"planevio: error: {e}\n")
        return e.exit_code
    configure_logging(args.verbose)
    try:
        return args.handler(args) or EXIT_OK
    except PlaneVioError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
