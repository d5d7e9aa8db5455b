# cli.py
"""
Command-line front end.

    python -m src.cli synth --transmission-dir T --reflection-dir R
    python -m src.cli train --profile smoke --manifest out/dataset/train/manifest.json
    python -m src.cli infer --checkpoint out/train/model.ckpt --input photo.png
    python -m src.cli eval  --checkpoint out/train/model.ckpt --manifest out/dataset/test/manifest.json

Parameters are layered: --config JSON file < dedicated flags < --set key=value.
Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration error.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from src.commands import CommandRegistry
from src.core import (
    ConfigError,
    InvalidArgumentError,
    InvalidInputError,
    RunContext,
    load_config_file,
    parse_overrides,
)
from src.settings import LOG_FORMAT, settings

logger = logging.getLogger(__name__)

USAGE_ERRORS = (ConfigError, InvalidArgumentError, InvalidInputError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src.cli", description="Single-image reflection removal")
    sub = parser.add_subparsers(dest="command", required=True)
    for slug, cls in sorted(CommandRegistry.all().items()):
        p = sub.add_parser(slug, help=cls.title, description=cls.title)
        p.add_argument("--config", type=Path, help="JSON config file (nested objects become dotted keys)")
        p.add_argument("--set", action="append", default=[], dest="overrides", metavar="KEY=VALUE",
                       help="override a parameter; value parsed as JSON when possible")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging and tracebacks")
        p.add_argument("--explain", action="store_true", help="print the command documentation and exit")
        for flag, (key, help_text) in cls.flags.items():
            p.add_argument(flag, dest=f"flag_{key}", default=None, help=help_text)
    return parser


def collect_params(cls, args: argparse.Namespace) -> dict:
    params = load_config_file(args.config) if args.config else {}
    for key, _ in cls.flags.values():
        value = getattr(args, f"flag_{key}", None)
        if value is not None:
            params[key] = value
    params.update(parse_overrides(args.overrides))
    return params


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else settings.log_level.upper(),
        format=LOG_FORMAT,
    )
    cls = CommandRegistry.get(args.command)
    if args.explain:
        print(cls.explain())
        return 0

    ctx = RunContext(out_dir=Path(os.getenv("RR_OUT_DIR", str(settings.out_dir))), verbose=args.verbose)
    try:
        command = cls(collect_params(cls, args))
        return command.run(ctx)
    except USAGE_ERRORS as e:
        if args.verbose:
            logger.exception(f"{args.command} failed")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        if args.verbose:
            logger.exception(f"{args.command} failed")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
