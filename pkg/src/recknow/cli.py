"""Command-line entry point: ``recknow <stage> --config run.toml``."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .config import load_config
from .errors import ConfigError, RecknowError, StaleUpstream, UpstreamMissing
from .knowledge import VARIANTS
from .pipeline import STAGES, Run

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_UPSTREAM, EXIT_PARTIAL = 0, 1, 2, 3, 4
BACKEND_FLAGS = {"http": "http", "replay": "replay", "mock": "mock_oracle", "mock_oracle": "mock_oracle"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recknow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        p = sub.add_parser(name, help="run every stage in order" if name == "all" else f"run the {name} stage")
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--force", action="store_true", help="recompute even if outputs are up to date")
        p.add_argument("--backend", choices=sorted(BACKEND_FLAGS), help="override gateway.backend")
        p.add_argument("--variant", choices=VARIANTS, help="override knowledge.variant")
        p.add_argument("--template", help="override prompt.template")
        p.add_argument("--seed", type=int, help="override sampling.seed")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def overrides_from(args) -> dict:
    out = {}
    if args.backend:
        out["gateway.backend"] = BACKEND_FLAGS[args.backend]
    if args.variant:
        out["knowledge.variant"] = args.variant
    if args.template:
        out["prompt.template"] = args.template
    if args.seed is not None:
        out["sampling.seed"] = args.seed
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides_from(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    run = Run(cfg, force=args.force)
    stages = STAGES if args.command == "all" else (args.command,)
    code = EXIT_OK
    for stage in stages:
        try:
            res = run.run_stage(stage)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except (UpstreamMissing, StaleUpstream) as exc:
            print(f"{stage}: {exc}", file=sys.stderr)
            return EXIT_UPSTREAM
        except RecknowError as exc:
            print(f"{stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_ERROR
        state = "up to date" if res.cached else "done"
        print(f"{stage}: {state}")
        if res.skipped:
            print(f"{stage}: {res.skipped} task(s) skipped", file=sys.stderr)
            code = EXIT_PARTIAL
    return code


if __name__ == "__main__":
    sys.exit(main())
