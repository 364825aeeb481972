"""Command-line front end: ``qlspec run | replay | report``."""
from __future__ import annotations

import argparse
import sys

from . import __version__
from .config import ConfigError, bundled_configs, load_config
from .runner import EXIT_CONFIG, replay, report, run_experiment


def _parser():
    parser = argparse.ArgumentParser(prog="qlspec", description="Quantum-logic molecular spectroscopy simulator")
    parser.add_argument("--version", action="version", version=f"qlspec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a configured experiment")
    run.add_argument("--config", required=True,
                     help=f"YAML path or bundled name ({', '.join(bundled_configs())})")
    run.add_argument("--seed", type=int, help="master seed (overrides the config)")
    run.add_argument("--trials", type=int, help="number of independent trials")
    run.add_argument("--out", help="output directory")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted config override, e.g. protocol.scan_passes=2 (repeatable)")
    run.add_argument("--workers", type=int, default=1, help="worker processes for trials")

    rep = sub.add_parser("replay", help="re-execute a run and verify byte-identical outputs")
    rep.add_argument("manifest", help="manifest.json or its run directory")

    rpt = sub.add_parser("report", help="summarize a run directory")
    rpt.add_argument("run_dir")
    return parser


def _run(args):
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.trials is not None:
        overrides.append(("trials", args.trials))
    try:
        config = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outcome = run_experiment(config, args.out, workers=max(1, args.workers))
    summary = outcome.results["summary"]
    status = "partial results" if outcome.exit_code else "ok"
    print(f"{status}: {config.protocol.name}, {summary['trials']} trial(s), "
          f"{summary['sim_time_total_s']:.1f} s simulated -> {outcome.out_dir}")
    return outcome.exit_code


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "run":
        return _run(args)
    if args.command == "replay":
        result = replay(args.manifest)
        stream = sys.stdout if result.exit_code == 0 else sys.stderr
        for message in result.messages:
            print(message, file=sys.stderr if message.startswith("warning") else stream)
        return result.exit_code
    code, text = report(args.run_dir)
    print(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
