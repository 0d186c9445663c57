"""Command line front end.

Exit codes: 0 on success, 2 for an unusable config or input file, 3 when
--check is set and a configured bound fails.
"""

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .harness import ConfigError


def _add_overrides(p):
    p.add_argument("--seed", type=int, default=None, help="override the seed")
    p.add_argument("--shots", type=int, default=None, help="override the shot budget")
    p.add_argument("--mode", default=None,
                   choices=["auto", "density-matrix", "dm", "trajectory"],
                   help="override the execution mode")
    p.add_argument("--preset", default=None, help="override the noise preset")
    p.add_argument("--workers", type=int, default=None,
                   help="override the worker count")


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    if args.shots is not None:
        cfg.shots = args.shots
    if args.mode is not None:
        cfg.mode = "density-matrix" if args.mode == "dm" else args.mode
    if args.preset is not None:
        cfg.noise = harness._resolve_noise(args.preset)
    if args.workers is not None:
        cfg.workers = args.workers
    # revalidate after mutation
    return harness.ExperimentConfig(**{
        f: getattr(cfg, f) for f in (
            "protocol", "shots", "seed", "input_state", "noise", "mode",
            "analyses", "out_dir", "records_format", "workers", "strict",
            "checks")})


def _print_summary(s):
    for b in s.choices:
        line = (f"{b['label']:24s} shots {b['shots']:>6d} "
                f"heralded {b['heralded_shots']:>6d} "
                f"rate {b['herald_rate']:.4g}")
        if b["fidelity"] is not None:
            line += f" fidelity {b['fidelity']:.4f}"
        if b.get("verdict"):
            line += (f" verdict[{b['verdict']['truth']}] "
                     f"{b['verdict']['probability']:.3f}")
        if b.get("chi"):
            line += (f" F_p {b['chi']['process_fidelity']:.4f}"
                     f" F_ave {b['chi']['average_fidelity']:.4f}")
        print(line)
    leak = s["leakage"]
    parts = [f"{k} {v:.4g}" for k, v in leak.items() if v is not None]
    if parts:
        print("leakage: " + ", ".join(parts))
    print(f"wall clock {s.wall_clock_s:.1f}s")


def _print_checks(s):
    ok = True
    for name, res in (s["checks"] or {}).items():
        status = "pass" if res["passed"] else "FAIL"
        print(f"check {name}: {status} (value {res['value']}, "
              f"bound {res['bound']})")
        ok = ok and res["passed"]
    return ok


def _cmd_run(args):
    cfg = _apply_overrides(harness.ExperimentConfig.from_file(args.config), args)
    summary = harness.run(cfg, out_dir=args.out)
    _print_summary(summary)
    if summary["checks"] is not None:
        if not _print_checks(summary) and args.check:
            return 3
    elif args.check:
        raise ConfigError("--check given but the config defines no checks")
    return 0


def _cmd_sweep(args):
    try:
        values = [float(v) for v in args.values.split(",") if v != ""]
    except ValueError:
        raise ConfigError(f"cannot parse sweep values {args.values!r}") from None
    cfg = _apply_overrides(harness.ExperimentConfig.from_file(args.config), args)
    points = harness.sweep(cfg, args.param, values, out_dir=args.out)
    for v, s in points:
        fids = ", ".join(f"{b['label']} {b['fidelity']:.4f}"
                         for b in s.choices if b["fidelity"] is not None)
        print(f"{args.param} = {v:<10g} {fids}")
    return 0


def _cmd_tomo(args):
    result = harness.records_chi(args.records)
    doc = {}
    for label, r in result.items():
        print(f"{label:24s} F_p {r['process_fidelity']:.4f} "
              f"F_ave {r['average_fidelity']:.4f}")
        doc[label] = {
            "chi": harness._dm_block(r["chi"].matrix),
            "process_fidelity": r["process_fidelity"],
            "average_fidelity": r["average_fidelity"],
        }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "chi.json").write_text(
            json.dumps(harness._to_jsonable(doc), sort_keys=True, indent=2)
            + "\n")
        print(f"wrote {out / 'chi.json'}")
    return 0


def _cmd_leak(args):
    leak = harness.records_leakage(args.records)
    for k, v in leak.items():
        print(f"{k}: {'n/a' if v is None else format(v, '.6g')}")
    return 0


def _cmd_report(args):
    paths = harness.report(args.summaries, args.out)
    for name, path in paths.items():
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="artifact",
        description="Blind-gate network simulator: run experiments, sweep "
                    "parameters, and reduce records to tables.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a config file")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="directory for summary and records")
    p.add_argument("--check", action="store_true",
                   help="exit 3 if any configured check fails")
    _add_overrides(p)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sweep", help="rerun a config across one parameter")
    p.add_argument("config")
    p.add_argument("--param", required=True,
                   help="'phi' or a noise field name")
    p.add_argument("--values", required=True,
                   help="comma-separated numbers")
    p.add_argument("--out", default=None)
    _add_overrides(p)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("tomo", help="rebuild chi matrices from a records file")
    p.add_argument("records")
    p.add_argument("--out", default=None, help="directory for chi.json")
    p.set_defaults(fn=_cmd_tomo)

    p = sub.add_parser("leak", help="recompute leakage from a records file")
    p.add_argument("records")
    p.set_defaults(fn=_cmd_leak)

    p = sub.add_parser("report", help="tabulate one or more summaries")
    p.add_argument("summaries", nargs="+",
                   help="summary.json files (or their directories)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
