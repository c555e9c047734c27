"""Command line entry point: ``skelforge <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, RunConfig
from .dataset.store import MissingArtifactError

EXIT_CONFIG = 2
EXIT_MISSING = 3

log = logging.getLogger("skelforge")


def build_parser() -> argparse.ArgumentParser:
    from .pipeline import COMMANDS

    p = argparse.ArgumentParser(prog="skelforge", description="Skeleton-bridged single-view shape reconstruction.")
    p.add_argument("command", choices=sorted(COMMANDS) + ["show-config"])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config entry, e.g. train.lr=3e-4")
    p.add_argument("--run-dir", help="shortcut for --set run_dir=...")
    p.add_argument("--data-dir", help="shortcut for --set data_dir=...")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.overrides)
    if args.run_dir:
        overrides.append(f"run_dir={json.dumps(args.run_dir)}")
    if args.data_dir:
        overrides.append(f"data_dir={json.dumps(args.data_dir)}")
    return cfg.with_overrides(overrides)


def main(argv: list[str] | None = None) -> int:
    from .pipeline import COMMANDS

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            print(cfg.to_json())
            return 0
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        log.error("missing artifact: %s", exc)
        return EXIT_MISSING
    print(json.dumps(result, default=str, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
