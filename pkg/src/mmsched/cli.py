"""Command-line entry point: ``mmsched <verb> [flags]``.

Verbs: calibrate, generate, simulate, experiment, goodput, report. Any key
from a ``--config`` plan file can be overridden by the matching flag.
Failures exit nonzero with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from .calibration import save_calibrations
from .core import MIX_PRESETS, POLICY_NAMES, InvalidConfig, MmschedError
from .engine import simulate
from .experiments import (
    ExperimentPlan,
    GoodputSearch,
    builtin_plans,
    calibration_for,
    default_out,
    load_plan_file,
    run_experiment,
)
from .metrics import dump_records, load_records, summarize
from .workload import annotate, dump_trace, generate, load_trace

log = logging.getLogger("mmsched")


def _policies(text: str) -> List[str]:
    names = [p.strip() for p in text.split(",") if p.strip()]
    for p in names:
        if p not in POLICY_NAMES:
            raise argparse.ArgumentTypeError(f"unknown policy {p!r}")
    return names


def _seeds(text: str) -> List[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _mix(text: str):
    if text.upper() in MIX_PRESETS:
        return text.upper()
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("mix is a preset (TO, ML, MH) or three comma-separated fractions")
    return tuple(parts)


def _plan_from_args(args, default_name: str = "adhoc", default_policies=("tcm",)) -> ExperimentPlan:
    """Base plan from --config (or a built-in name), then apply flag overrides."""
    if getattr(args, "plan", None):
        plans = builtin_plans()
        if args.plan in plans:
            plan = plans[args.plan]
        else:
            plan = load_plan_file(args.plan)
    elif args.config:
        plan = load_plan_file(args.config)
    else:
        plan = ExperimentPlan(default_name, default_policies)
    over = {}
    wl = {}
    if args.seed is not None:
        over["seeds"] = args.seed
    if args.policy is not None:
        over["policies"] = args.policy
    if args.rate is not None:
        wl["rate"] = args.rate
    if args.mix is not None:
        wl["mix"] = args.mix
    if getattr(args, "duration", None) is not None:
        wl["duration"] = args.duration
    if args.kv_capacity is not None:
        over["kv_capacity"] = args.kv_capacity
    if args.slo_scale is not None:
        over["slo_scale"] = args.slo_scale
    if wl:
        over["workload"] = replace(plan.workload, **wl)
    # an explicit override of the swept quantity collapses the sweep
    axis_flag = {"rate": "rate", "mix": "mix", "kv_capacity": "kv_capacity", "slo_scale": "slo_scale"}
    if plan.sweep and getattr(args, axis_flag[plan.sweep], None) is not None:
        over["sweep"] = None
        over["sweep_values"] = ()
    return replace(plan, **over) if over else plan


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON plan file")
    p.add_argument("--seed", type=_seeds, help="seed or comma-separated seeds")
    p.add_argument("--policy", type=_policies, help="policy or comma-separated policies")
    p.add_argument("--rate", type=float, help="request rate in req/s")
    p.add_argument("--kv-capacity", type=int, help="KV cache capacity in tokens")
    p.add_argument("--slo-scale", type=float, help="SLO as a multiple of isolated latency")
    p.add_argument("--mix", type=_mix, help="TO, ML, MH or text,image,video fractions")
    p.add_argument("--duration", type=float, help="trace length in seconds")
    p.add_argument("--out", help="output path (default: $MMSCHED_OUT or ./mmsched-out)")
    p.add_argument("--workers", type=int, default=1, help="parallel simulation processes")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmsched", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("calibrate", help="fit estimators and classifier for the plan's model profile")
    _add_common(p)

    p = sub.add_parser("generate", help="write an annotated trace as JSON lines")
    _add_common(p)

    p = sub.add_parser("simulate", help="simulate one trace under one policy")
    _add_common(p)
    p.add_argument("--trace", help="trace file from `generate` (default: generate one)")
    p.add_argument("--events", action="store_true", help="also write the per-iteration event log")

    p = sub.add_parser("experiment", help="run a built-in or file-based plan")
    _add_common(p)
    p.add_argument("plan", nargs="?", help="built-in plan name or plan file")
    p.add_argument("--list", action="store_true", help="list built-in plans and exit")

    p = sub.add_parser("goodput", help="largest rate keeping SLO attainment above a threshold")
    _add_common(p)
    p.add_argument("--group", default="O", choices=["M", "C", "T", "O"])
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--low", type=float, default=0.25)
    p.add_argument("--high", type=float, default=8.0)
    p.add_argument("--resolution", type=float, default=0.05)

    p = sub.add_parser("report", help="recompute summaries from stored record files")
    p.add_argument("paths", nargs="+", help="record files or directories containing them")
    p.add_argument("--out", help="write CSV here instead of stdout")
    return ap


def _out_path(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(default_out()) / default_name


def cmd_calibrate(args) -> int:
    plan = _plan_from_args(args)
    cal = calibration_for(plan)
    path = _out_path(args, "calibration.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_calibrations(path, {cal.profile_name: cal})
    print(path)
    return 0


def cmd_generate(args) -> int:
    plan = _plan_from_args(args)
    seed = plan.seeds[0]
    trace = generate(plan.workload_for(None, seed))
    annotate(trace, plan.profile.without_noise(), plan.chunk_budget)
    path = _out_path(args, f"trace-seed{seed}.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    dump_trace(trace, path)
    print(f"{path}: {len(trace.requests)} requests")
    return 0


def cmd_simulate(args) -> int:
    plan = _plan_from_args(args)
    if len(plan.policies) != 1:
        raise InvalidConfig("simulate takes exactly one policy")
    policy, seed = plan.policies[0], plan.seeds[0]
    config = plan.config_for(policy, None, seed)
    if args.trace:
        trace = load_trace(args.trace)
    else:
        trace = generate(plan.workload_for(None, seed))
    if not trace.isolated:
        annotate(trace, plan.profile.without_noise(), plan.chunk_budget)
    result = simulate(trace, plan.profile, config, calibration_for(plan), record_events=args.events)
    out = _out_path(args, f"simulate-{policy}-seed{seed}")
    out.mkdir(parents=True, exist_ok=True)
    dump_records(result.records, out / "records.jsonl")
    summary = summarize(result.records)
    (out / "summary.csv").write_text(summary.to_csv())
    if args.events:
        (out / "events.jsonl").write_text(result.events_jsonl())
    sys.stdout.write(summary.to_csv())
    return 0


def cmd_experiment(args) -> int:
    if args.list:
        for name, plan in builtin_plans().items():
            sweep = f" sweep {plan.sweep}={list(plan.sweep_values)}" if plan.sweep else ""
            print(f"{name}: {', '.join(plan.policies)}{sweep}")
        return 0
    if not args.plan and not args.config:
        raise InvalidConfig("experiment needs a plan name, a plan file or --config")
    plan = _plan_from_args(args)
    result = run_experiment(plan, out=args.out, workers=args.workers)
    print(result.directory)
    return 0


def cmd_goodput(args) -> int:
    plan = _plan_from_args(args)
    if len(plan.policies) != 1:
        raise InvalidConfig("goodput takes exactly one policy")
    search = GoodputSearch(plan, plan.policies[0])
    g = search.goodput(
        args.group, threshold=args.threshold, low=args.low, high=args.high, resolution=args.resolution
    )
    print(json.dumps({"policy": search.policy, "group": args.group, "threshold": args.threshold, "goodput": g}))
    return 0


def cmd_report(args) -> int:
    files: List[Path] = []
    for p in map(Path, args.paths):
        files.extend(sorted(p.rglob("*.jsonl")) if p.is_dir() else [p])
    if not files:
        raise InvalidConfig("no record files found")
    records = [r for f in files for r in load_records(f)]
    text = summarize(records).to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "generate": cmd_generate,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
    "goodput": cmd_goodput,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (MmschedError, OSError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "verb": args.verb}
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
