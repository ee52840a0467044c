# labelprop/main.py
# Entry point (root parser, subcommands mounted here)

import argparse
import logging
import sys
from typing import Optional, Sequence

from labelprop.commands import evaluate, jitter, make_sets, propagate, sweep, synth, train
from labelprop.core.config import load_config
from labelprop.core.exceptions import ConfigError, LabelPropError
from labelprop.core.logging import configure_logging

logger = logging.getLogger("labelprop")

COMMANDS = (synth, propagate, make_sets, jitter, train, evaluate, sweep)


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors surface as ``ConfigError`` (exit 1) instead of argparse's exit 2."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _add_globals(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=default, help="rebase every seed in the configuration")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument(
        "--overwrite", action="store_true", default=argparse.SUPPRESS if suppress else False,
        help="replace a non-empty output directory",
    )
    parser.add_argument("--log-level", default=default, help="overrides log_level from the configuration")


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(
        prog="labelprop",
        description="Pseudo ground truth from propagated video labels, and trust-factor training on it.",
    )
    _add_globals(parser, suppress=False)
    # Global flags are accepted after the subcommand as well
    common = ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)

    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for command in COMMANDS:
        command.register(subparsers, common)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level or "INFO")
        config = load_config(args.config, seed=args.seed)
        configure_logging(args.log_level or config.log_level)
        return args.func(args, config)
    except LabelPropError as e:
        logger.error("%s", e.detail)
        return e.exit_code
    except Exception:
        logger.exception("unexpected failure")
        return 2


if __name__ == "__main__":
    sys.exit(main())
