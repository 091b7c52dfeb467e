"""``simcan`` command line.

Exit codes: 0 success, 1 runtime failure, 2 invalid scenario (line-numbered
diagnostics on stderr), 3 nondeterminism caught by ``run --check``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from simcan import metrics
from simcan.errors import ScenarioError, SimcanError
from simcan.scenario import load_scenario

EXIT_FAIL, EXIT_SCENARIO, EXIT_NONDETERMINISM = 1, 2, 3

log = logging.getLogger("simcan.cli")


def _lengths(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated bit lengths, got {text!r}")
    if not out or any(n not in (64, 128, 256) for n in out):
        raise argparse.ArgumentTypeError("digest lengths must be among 64, 128, 256")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simcan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario and write report and logs")
    run.add_argument("scenario")
    run.add_argument("--out", type=Path, help="output directory (default: simcan-out/<name>)")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--check", action="store_true", help="run twice and require identical output")

    sw = sub.add_parser("sweep-digest", help="CPU cost against digest length, as CSV")
    sw.add_argument("scenario")
    sw.add_argument("--lengths", type=_lengths, help="e.g. 64,128,256 (default: from the scenario)")
    sw.add_argument("--out", type=Path, help="write the CSV here instead of stdout")

    sp = sub.add_parser("speculate", help="real-time CPU with speculation off, all-hit and all-miss")
    sp.add_argument("scenario")
    sp.add_argument("--seed", type=int)

    fm = sub.add_parser("fleet-math", help="back-end key storage for a fleet")
    fm.add_argument("--vehicles", type=int, required=True)
    fm.add_argument("--keys", type=int, required=True)
    fm.add_argument("--key-bytes", type=int, required=True)
    fm.add_argument("--multiplier", type=float, default=3.0)
    fm.add_argument("--engine-keys", type=int, default=16)

    at = sub.add_parser("attacks", help="run every attack script in a scenario")
    at.add_argument("scenario")
    at.add_argument("--out", type=Path, help="also write attacks.json here")
    at.add_argument("--seed", type=int)
    return p


def write_run(result: metrics.RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(metrics.dumps(result.report))
    for name, lines in result.logs.items():
        (out / name).write_text("".join(line + "\n" for line in lines))


def full_run(scn, seed=None) -> metrics.RunResult:
    """The network run, plus every attack script when the scenario has any."""
    result = metrics.run_scenario(scn, seed)
    if scn.raw.get("attacks"):
        result.logs["attacks.json"] = metrics.dumps(metrics.run_attacks(scn, seed)).splitlines()
    return result


def _fingerprint(result: metrics.RunResult) -> str:
    parts = [metrics.dumps(result.report)] + ["\n".join(v) for _, v in sorted(result.logs.items())]
    return "\x00".join(parts)


def cmd_run(args) -> int:
    scn = load_scenario(args.scenario)
    log.info("running %s (sha256 %s, seed %s)", scn.name, scn.digest[:12],
             scn.seed if args.seed is None else args.seed)
    result = full_run(scn, args.seed)
    if args.check:
        again = full_run(scn, args.seed)
        if _fingerprint(again) != _fingerprint(result):
            print(f"{args.scenario}: two runs with the same seed differ", file=sys.stderr)
            return EXIT_NONDETERMINISM
    out = args.out or Path("simcan-out") / scn.name
    write_run(result, out)
    rep = result.report
    print(f"{scn.name}: provisioned in {rep['provisioning']['latency_us']} us, "
          f"{len(result.logs['rx.jsonl'])} receptions, {rep['violations']} violations -> {out}")
    if args.check:
        print("check: identical output on both runs")
    return 0


def cmd_sweep(args) -> int:
    scn = load_scenario(args.scenario)
    rep = metrics.sweep_for(scn, args.lengths)
    rows = [dict(r, scenario_digest=scn.digest) for r in rep["series"]]
    text = metrics.rows_to_csv(rows)
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_speculate(args) -> int:
    sys.stdout.write(metrics.dumps(metrics.speculation_for(load_scenario(args.scenario), args.seed)))
    return 0


def cmd_fleet(args) -> int:
    rep = metrics.fleet_math(args.vehicles, args.keys, args.key_bytes, args.multiplier, args.engine_keys)
    sys.stdout.write(metrics.dumps(rep))
    return 0


def cmd_attacks(args) -> int:
    rep = metrics.run_attacks(load_scenario(args.scenario), args.seed)
    text = metrics.dumps(rep)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "attacks.json").write_text(text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"run": cmd_run, "sweep-digest": cmd_sweep, "speculate": cmd_speculate,
            "fleet-math": cmd_fleet, "attacks": cmd_attacks}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SIMCAN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as exc:
        where = getattr(args, "scenario", "<scenario>")
        for line, msg in exc.diagnostics:
            print(f"{where}:{line}: {msg}" if line else f"{where}: {msg}", file=sys.stderr)
        return EXIT_SCENARIO
    except SimcanError as exc:
        print(f"simcan: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
