"""Command-line entry point: ``davieslab <subcommand> [--config PATH] [--out DIR] ...``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ExperimentConfig
from .errors import DaviesLabError
from .pipeline import run_pipeline

SUBCOMMANDS = {
    "build": ("build",),
    "spectral": ("spectral",),
    "exit-times": ("exit-times",),
    "csa": ("csa",),
    "iterate": ("iterate",),
    "fit": ("fit",),
    "pipeline": None,
}


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset flags given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=d(None), help="flat 'key = value' config file")
    common.add_argument("--out", metavar="DIR", default=d(None),
                        help="output directory (default: config 'out')")
    common.add_argument("--seed", type=int, default=d(None), help="random seed (overrides config)")
    common.add_argument("--threads", type=int, default=d(None), help="worker threads for independent runs")
    # argparse parses a subcommand into a fresh namespace, so its --set list
    # gets its own destination and is merged in load_config
    common.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                        dest="set_after" if suppress else "set",
                        help="override a config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="davieslab", description=__doc__, parents=[_common_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[_common_flags(True)], help=f"run the {name} stage and its prerequisites")
    return parser


def load_config(args) -> ExperimentConfig:
    overrides = {}
    for item in list(args.set) + list(getattr(args, "set_after", [])):
        if "=" not in item:
            raise DaviesLabError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("seed", "threads", "out"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = str(v)
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig.from_text("", **overrides)


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        bundle = run_pipeline(cfg, SUBCOMMANDS[args.command], out=cfg.out)
    except DaviesLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if type(exc) is DaviesLabError else exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for line in bundle.summary:
        print(line)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
