"""``euiccsim`` command line: run, validate and replay scenario scripts."""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from . import scenario as sc
from . import subman


def _cmd_run(args) -> int:
    try:
        scenario = sc.load(args.file)
    except (OSError, sc.ScenarioError) as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return 2
    preload = subman.load_registry(args.load_registry) if args.load_registry else None
    report, sim = sc.run(scenario, seed=args.seed, trace_path=args.trace, preload=preload)
    if args.registry:
        subman.save_registry(args.registry, sim.smsrs())
    sys.stdout.write(report.to_json() if args.json_report else report.to_text())
    return 0 if report.passed else 1


def _cmd_validate(args) -> int:
    try:
        scenario = sc.load(args.file)
    except (OSError, sc.ScenarioError) as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return 2
    print(f"{args.file}: ok ({len(scenario.steps)} steps, {len(scenario.expectations)} expectations)")
    return 0


def _cmd_replay(args) -> int:
    try:
        identical, report = sc.replay(args.trace)
    except (OSError, ValueError, KeyError) as exc:
        print(f"{args.trace}: cannot replay: {exc}", file=sys.stderr)
        return 2
    print(f"replay of {report.scenario} (seed {report.seed}): "
          f"{'identical trace' if identical else 'TRACE DIVERGED'}")
    for name, digest in report.digests.items():
        print(f"  {name} {digest}")
    return 0 if identical else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="euiccsim", description="eUICC remote provisioning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and check its expectations")
    run.add_argument("file")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--trace", metavar="PATH", help="write the JSON-lines trace here")
    run.add_argument("--registry", metavar="PATH", help="save the final SM-SR registries here")
    run.add_argument("--load-registry", metavar="PATH", help="preload SM-SR registries from a saved file")
    run.add_argument("--json-report", action="store_true", help="print the report as JSON")
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate", help="parse and validate a scenario")
    val.add_argument("file")
    val.set_defaults(func=_cmd_validate)

    rep = sub.add_parser("replay", help="re-run a recorded trace and compare")
    rep.add_argument("trace")
    rep.set_defaults(func=_cmd_replay)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
