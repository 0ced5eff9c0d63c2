"""Command-line entry points.

Subcommands::

    run     one scenario from a spec (+ optional fault plan) -> report JSON
    verify  run + exactly-once verdict; exit 0 on PASS, 1 on FAIL
    demo    built-in access-tally pipeline at toy scale, with a kill
    soak    N seeded random-chaos scenarios; aggregate pass rate

Every scenario is fully determined by (spec, fault plan, seed): rerunning
any command with the same arguments reproduces the report byte for byte.

Exit codes: 0 success/PASS; 1 verification or soak failure; 2 invalid
spec/plan/usage; 3 deadlock (protocol bug surfaced by the scenario).
"""

import argparse
import json
import sys
from typing import Optional

from .errors import DeadlockError, SpecError
from .faults import FaultPlan, random_plan
from .harness import ProcessorSpec, Scenario, run_processor

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_DEADLOCK = 3


def _load_spec(path: Optional[str]) -> ProcessorSpec:
    if path is None:
        return ProcessorSpec().validate()
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return ProcessorSpec.from_json(handle.read())
    except OSError as exc:
        raise SpecError("spec file %s: %s" % (path, exc)) from exc


def _load_plan(path: Optional[str]) -> Optional[FaultPlan]:
    if path is None:
        return None
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return FaultPlan.from_json(handle.read())
    except OSError as exc:
        raise SpecError("fault plan file %s: %s" % (path, exc)) from exc


def _emit_report(report, path: Optional[str], out) -> None:
    text = report.to_json()
    if path is None:
        print(text, file=out)
    else:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")


def cmd_run(args, out) -> int:
    spec = _load_spec(args.spec)
    plan = _load_plan(args.faults)
    report = run_processor(spec, plan, seed=args.seed,
                           journal_path=args.journal)
    _emit_report(report, args.report, out)
    return EXIT_OK


def cmd_verify(args, out) -> int:
    spec = _load_spec(args.spec)
    plan = _load_plan(args.faults)
    report = run_processor(spec, plan, seed=args.seed,
                           journal_path=args.journal)
    if args.report is not None:
        _emit_report(report, args.report, out)
    print("%s seed=%d duplicates=%d losses=%d mismatches=%d restarts=%d"
          % (report.verdict, report.seed, report.duplicates, report.losses,
             report.table_mismatches, sum(report.restarts.values())),
          file=out)
    for line in report.details[:10]:
        print("  " + line, file=out)
    return EXIT_OK if report.verdict == "PASS" else EXIT_FAIL


def cmd_demo(args, out) -> int:
    spec = ProcessorSpec(
        pipeline="access-tally",
        processor_guid="demo",
        mapper_count=2,
        reducer_count=2,
        input_rows=2000,
        seed=args.seed,
    ).validate()
    plan = FaultPlan.from_json(json.dumps({
        "events": [
            {"time_us": 400_000, "action": "kill",
             "kind": "mapper", "index": 0},
            {"time_us": 900_000, "action": "kill",
             "kind": "reducer", "index": 1},
        ],
    }))
    scenario = Scenario(spec, plan, seed=args.seed)
    scenario.run()
    report = scenario.report()

    attributable = len(scenario.store.snapshot_sorted("effects"))
    print("access-tally demo: %d log rows, %d attributable, 2 mappers x"
          " 2 reducers, one kill each side" % (report.fed_rows, attributable),
          file=out)
    print("verdict=%s duplicates=%d losses=%d restarts=%s"
          % (report.verdict, report.duplicates, report.losses,
             json.dumps(report.restarts, sort_keys=True)), file=out)
    print("virtual_time=%.3fs rounds=%d split_brain=%d"
          % (report.virtual_time_us / 1e6, report.rounds_to_convergence,
             report.split_brain_detections), file=out)
    tally = {
        (key[0].payload.decode(), key[1].payload.decode()): row
        for key, row in scenario.store.snapshot_sorted("tally_access").items()
    }
    print("tally_access (%d user/cluster pairs, first 8):" % len(tally),
          file=out)
    for user, cluster in sorted(tally)[:8]:
        row = tally[(user, cluster)]
        count, weight, last = (value.payload for value in row.values)
        print("  %-4s %-5s count=%-3d weight=%-5d last_access=%d"
              % (user, cluster, count, weight, last), file=out)
    return EXIT_OK if report.verdict == "PASS" else EXIT_FAIL


def cmd_soak(args, out) -> int:
    spec = _load_spec(args.spec)
    failures = 0
    for seed in range(args.seeds):
        plan = random_plan(seed, spec.mapper_count, spec.reducer_count,
                           horizon_us=args.horizon_us,
                           intensity=args.intensity)
        try:
            report = run_processor(spec, plan, seed=seed)
        except DeadlockError as exc:
            failures += 1
            print("seed %-4d DEADLOCK %s" % (seed, exc), file=out)
            continue
        if report.verdict != "PASS":
            failures += 1
        print("seed %-4d %s dup=%d loss=%d restarts=%d vtime=%.2fs"
              % (seed, report.verdict, report.duplicates, report.losses,
                 sum(report.restarts.values()),
                 report.virtual_time_us / 1e6), file=out)
    passed = args.seeds - failures
    print("%d/%d passed" % (passed, args.seeds), file=out)
    return EXIT_OK if failures == 0 else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamshuffle",
        description="Streaming shuffle scenario runner and verifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, journal=True):
        p.add_argument("--spec", metavar="PATH",
                       help="processor spec JSON (default: built-in"
                            " count-by-key, 2x2, 1000 rows)")
        p.add_argument("--faults", metavar="PATH",
                       help="fault plan JSON (default: no faults)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the spec's seed")
        if journal:
            p.add_argument("--journal", metavar="PATH",
                           help="write the state-store journal here and"
                                " meter write amplification")
        p.add_argument("--report", metavar="PATH",
                       help="write the report JSON here instead of stdout")

    run_p = sub.add_parser("run", help="run one scenario, print the report")
    common(run_p)
    run_p.set_defaults(fn=cmd_run)

    verify_p = sub.add_parser(
        "verify", help="run one scenario; exit nonzero unless exactly-once"
                       " verification passes")
    common(verify_p)
    verify_p.set_defaults(fn=cmd_verify)

    demo_p = sub.add_parser(
        "demo", help="access-tally pipeline at toy scale with kills")
    demo_p.add_argument("--seed", type=int, default=0)
    demo_p.set_defaults(fn=cmd_demo)

    soak_p = sub.add_parser(
        "soak", help="run N seeds of random chaos against one spec")
    soak_p.add_argument("--seeds", type=int, default=20, metavar="N")
    soak_p.add_argument("--spec", metavar="PATH")
    soak_p.add_argument("--horizon-us", type=int, default=2_000_000,
                        dest="horizon_us",
                        help="fault events land inside this window")
    soak_p.add_argument("--intensity", type=float, default=1.0,
                        help="scales the number of fault events")
    soak_p.set_defaults(fn=cmd_soak)
    return parser


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; normalize other exits too.
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.fn(args, out)
    except SpecError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except DeadlockError as exc:
        print("deadlock: %s" % exc, file=sys.stderr)
        return EXIT_DEADLOCK


if __name__ == "__main__":
    sys.exit(main())
