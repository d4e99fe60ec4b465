"""Command-line entry point.

Exit codes: 0 pass, 1 numerical acceptance failure, 2 configuration error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError
from .pipeline import IncompatibleRunsError, RunManifest, compare_runs, replay, run_pipeline

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

STAGE_COMMANDS = ("simulate", "attractor", "lyapunov", "curves", "verify")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="randperiodic", description="Random periodic curves on the cylinder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML config file")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="parent directory for run directories")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--workers", type=int, help="override run.workers")

    for name in STAGE_COMMANDS:
        common(sub.add_parser(name, help=f"run the {name} stage and its prerequisites"))
    pipe = sub.add_parser("pipeline", help="run the stages listed in run.stages")
    common(pipe)
    pipe.add_argument("--replay", type=Path, metavar="MANIFEST", help="re-run a manifest and check outputs are identical")
    cmp_ = sub.add_parser("compare", help="diff two run manifests")
    cmp_.add_argument("manifest_a", type=Path)
    cmp_.add_argument("manifest_b", type=Path)
    return p


def _report(man: RunManifest) -> None:
    print(f"run directory: {man.run_dir}")
    for stage, ok in man.acceptance.items():
        print(f"  {stage:10s} {'pass' if ok else 'FAIL'}")
    if man.error:
        print(f"  error: {man.error}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            a, b = RunManifest.load(args.manifest_a), RunManifest.load(args.manifest_b)
            diff = compare_runs(a, b)
            print(json.dumps(diff, indent=2, sort_keys=True))
            return EXIT_PASS if not diff else EXIT_FAIL
        if args.command == "pipeline" and args.replay is not None:
            man, same = replay(args.replay, args.out)
            _report(man)
            for name, ok in sorted(same.items()):
                print(f"  replay {name}: {'identical' if ok else 'DIFFERS'}")
            if man.crashed:
                return EXIT_RUNTIME
            return EXIT_PASS if all(same.values()) else EXIT_FAIL
        stages = None if args.command == "pipeline" else [args.command]
        man = run_pipeline(args.config, args.out, seed=args.seed, workers=args.workers, stages=stages)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IncompatibleRunsError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _report(man)
    if man.crashed:
        return EXIT_RUNTIME
    return EXIT_PASS if man.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
