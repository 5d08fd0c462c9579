"""
molmap command line entry point.

    molmap simulate|segment|count|pipeline|experiment --config <path.json> [--seed N] [--out DIR]

Exit codes: 0 on success, 2 on a configuration error, 3 on a data error.
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from utils.errors import ConfigError, MolmapError
from utils.logger import logger

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def build_parser() -> argparse.ArgumentParser:
    from handlers import register_handlers

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline configuration JSON")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, help="override the output directory")

    parser = argparse.ArgumentParser(prog="molmap", description="Molecular maps from antibunching images")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_handlers(subparsers, common)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and map errors to exit codes."""
    try:
        # settings are read from the environment on import
        from utils.config import load_config

        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        logger.info(f"Running {args.command} with config hash {cfg.config_hash()}")
        paths = args.handler(cfg, args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (MolmapError, ValueError, OSError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA

    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
