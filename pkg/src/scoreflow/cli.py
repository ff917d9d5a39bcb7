"""Command-line entry point: ``python -m scoreflow <subcommand> [flags]``.

On success the manifest is printed as JSON and the exit code is 0. On
failure a JSON object ``{"error": ..., "message": ...}`` is printed and the
exit code is 2 for configuration errors and 1 for failed experiments.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigInvalid, ExperimentFailed
from .experiments import DEFAULTS, load_config, make_config, run


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scoreflow", description="Run a reproducible experiment.")
    ap.add_argument("subcommand", help="one of: " + ", ".join(DEFAULTS))
    ap.add_argument("--config", help="JSON file with parameters for the subcommand")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", help="output directory (default: ./out)")
    ap.add_argument("--reps", type=int, help="override the replicate count")
    ap.add_argument("--threads", type=int, help="worker threads for replicate loops")
    ap.add_argument("--show-defaults", action="store_true",
                    help="print the default config for the subcommand and exit")
    return ap


def _fail(kind: str, msg: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": msg}))
    return code


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; keep the machine-readable contract
        if exc.code in (0, None):
            return 0
        return _fail("ConfigInvalid", "could not parse command-line arguments", 2)
    try:
        if args.subcommand not in DEFAULTS:
            raise ConfigInvalid(f"unknown subcommand {args.subcommand!r}")
        if args.show_defaults:
            print(json.dumps(DEFAULTS[args.subcommand], indent=2))
            return 0
        doc = load_config(args.config) if args.config else None
        cfg = make_config(args.subcommand, doc, seed=args.seed, out=args.out, reps=args.reps,
                          threads=args.threads)
        man = run(args.subcommand, cfg)
    except ConfigInvalid as exc:
        return _fail("ConfigInvalid", str(exc), 2)
    except ExperimentFailed as exc:
        return _fail("ExperimentFailed", str(exc), 1)
    except Exception as exc:  # anything unexpected still gets the JSON envelope
        return _fail("ExperimentFailed", f"{type(exc).__name__}: {exc}", 1)
    print(man.to_json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
