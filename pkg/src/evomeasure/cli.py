"""Command line entry point: ``evomeasure run|validate|replay``."""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import (
    EXIT_CONFIG,
    EXIT_FAIL,
    EXIT_PASS,
    KINDS,
    ReplayMismatch,
    default_config,
    load_config,
    replay,
    run,
    validate,
)
from .io import dump_toml, load_toml
from .model import ParameterError


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="evomeasure", description="Evolution-system experiments for a stochastic lattice equation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    p_run.add_argument("--out", default=None, help="output directory (default: $EVOMEASURE_OUT/<kind>)")

    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")

    p_rep = sub.add_parser("replay", help="re-run a manifest and compare checksums")
    p_rep.add_argument("manifest")
    p_rep.add_argument("--threads", type=int, default=1)
    p_rep.add_argument("--out", default=None)

    p_init = sub.add_parser("init", help="print a default config for an experiment kind")
    p_init.add_argument("kind", choices=KINDS)
    p_init.add_argument("--seed", type=int, default=20240521)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "init":
        sys.stdout.write(dump_toml(default_config(args.kind, args.seed)))
        return EXIT_PASS

    if args.command == "validate":
        try:
            problems = validate(load_toml(args.config))
        except (OSError, ValueError) as exc:
            problems = [f"cannot read config: {exc}"]
        for msg in problems:
            print(f"violation: {msg}")
        if not problems:
            print("ok")
        return EXIT_CONFIG if problems else EXIT_PASS

    if args.command == "run":
        try:
            cfg = load_config(args.config)
        except (OSError, ValueError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        manifest = run(cfg, args.out, threads=args.threads)
        print(f"{cfg.kind}: {manifest.status} -> {manifest.path}")
        return manifest.exit_code

    try:
        manifest = replay(args.manifest, args.out, threads=args.threads)
    except ReplayMismatch as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    except (OSError, KeyError, ParameterError) as exc:
        print(f"cannot replay: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"replay ok: {len(manifest.outputs)} files identical")
    return EXIT_PASS


if __name__ == "__main__":
    sys.exit(main())
