"""Command-line entry point.

Subcommands: replay, goodput, profile, sweep, budgets, validate-trace,
convert-trace. Every subcommand is a pure function of its inputs (config
file, trace file, flags); exit codes are 0 for success, 2 for usage or
configuration errors, 3 for SLO infeasibility.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional

from .cluster import ClusterSpec, DisaggregationMethod, run_trace
from .config import ConfigError, RunConfig, load_config
from .engine import (
    ALL_INSTANCE_TYPES,
    POLICIES,
    derive_latency_cap,
    search_budgets,
)
from .metrics import GoodputInfeasible, find_goodput
from .profiler import (
    ProfilerError,
    brute_force_select,
    select_method,
)
from .workload import (
    SloSpec,
    TraceError,
    convert_csv_trace,
    load_trace,
    scale_to_rate,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3


def _load(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this subcommand")
    return load_config(args.config)


def _load_trace(args, cfg: RunConfig):
    if not args.trace:
        raise ConfigError("--trace is required for this subcommand")
    path = Path(args.trace)
    if not path.exists():
        raise ConfigError(f"trace file not found: {path}")
    return load_trace(path, default_slo=cfg.slo)


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path.cwd()
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_replay(args) -> int:
    cfg = _load(args)
    trace = _load_trace(args, cfg)
    report = run_trace(cfg.cluster_spec(), cfg.model, cfg.hardware, cfg.slo,
                       trace, check_invariants=args.check_invariants)
    report.meta["config"] = cfg.to_dict()
    out = _out_dir(args)
    report.write_json(out / cfg.report_json)
    if cfg.per_request_csv:
        report.write_csv(out / cfg.per_request_csv)
    for b in report.meta["budgets"].values():
        if not b["feasible"]:
            print("WARNING: batch budgets infeasible under the SLO caps; "
                  "latencies will exceed their bounds", file=sys.stderr)
            break
    agg = report.aggregates
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print(f"requests            {agg['n_requests']}")
        print(f"finished            {agg['n_finished']}")
        print(f"slo_attainment      {agg['slo_attainment']:.4f}")
        print(f"throughput_rps      {agg['throughput_rps']:.4f}")
        ttft = agg["ttft_percentiles_s"]
        tbt = agg["tbt_percentiles_s"]
        print(f"ttft_p99_s          {ttft.get('p99', float('nan')):.4f}")
        print(f"tbt_p99_s           {tbt.get('p99', float('nan')):.6f}")
        print(f"migration_share     {agg['migration_time_share']:.6f}")
    return EXIT_OK


def cmd_goodput(args) -> int:
    cfg = _load(args)
    trace = _load_trace(args, cfg)
    if args.tolerance <= 0:
        raise ConfigError("tolerance must be > 0")
    if not 0 < args.rate_min < args.rate_max:
        raise ConfigError("rate bounds must satisfy 0 < min < max")
    spec = cfg.cluster_spec()

    def attainment_at(rate: float) -> float:
        scaled = scale_to_rate(trace, rate)
        return run_trace(spec, cfg.model, cfg.hardware, cfg.slo,
                         scaled).attainment

    try:
        result = find_goodput(attainment_at,
                              (args.rate_min, args.rate_max),
                              args.tolerance)
    except GoodputInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    if args.verbose:
        for rate, att in result.probes:
            print(f"probe rate={rate:.4f} attainment={att:.4f}")
    if args.json:
        print(json.dumps({"goodput_rps": result.rate,
                          "probes": list(result.probes)}, sort_keys=True))
    else:
        print(f"goodput_rps         {result.rate:.4f}")
        print(f"replay_runs         {result.n_runs}")
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = _load(args)
    trace = _load_trace(args, cfg)
    n = args.n or cfg.n_instances
    if n < 3:
        raise ConfigError("profile needs at least 3 instances")
    overrides = {
        "image_pool_fraction": cfg.image_pool_fraction,
        "preprocess_delay": cfg.preprocess_delay_s,
        "alpha": cfg.alpha,
        "vision_cap_share": cfg.vision_cap_share,
    }
    select = brute_force_select if args.brute_force else select_method
    try:
        result = select(trace, n, cfg.slo, cfg.model, cfg.hardware,
                        rate_bounds=(args.rate_min, args.rate_max),
                        tolerance=args.tolerance, spec_overrides=overrides)
    except ProfilerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    rows = [{"method": m.label, "goodput_rps": g} for m, g in result.table]
    if args.json:
        print(json.dumps({"winner": result.best.label, "table": rows},
                         sort_keys=True))
    else:
        for row in rows:
            mark = " *" if row["method"] == result.best.label else ""
            print(f"{row['method']:<24} {row['goodput_rps']:.4f}{mark}")
        print(f"winner: {result.best.label}")
    return EXIT_OK


def _sweep_points(args, cfg: RunConfig) -> List[dict]:
    points = []
    if args.axis == "instance_ratio":
        n = args.n or cfg.n_instances
        if n < 2:
            raise ConfigError("instance_ratio sweep needs >= 2 instances")
        for ep in range(1, n):
            method = DisaggregationMethod.parse(f"EP:{ep},D:{n - ep}")
            points.append({"label": method.label, "method": method,
                           "rate": args.rate})
    elif args.axis == "request_rate":
        if args.rate_step <= 0 or not 0 < args.rate_min <= args.rate_max:
            raise ConfigError("invalid rate grid")
        rate = args.rate_min
        while rate <= args.rate_max + 1e-9:
            points.append({"label": f"rate={rate:g}", "method": cfg.method,
                           "rate": rate})
            rate += args.rate_step
    elif args.axis == "scheduler_policy":
        for policy in POLICIES:
            points.append({"label": policy, "method": cfg.method,
                           "rate": args.rate, "policy": policy})
    else:
        raise ConfigError(f"unknown sweep axis {args.axis!r}")
    return points


def cmd_sweep(args) -> int:
    cfg = _load(args)
    trace = _load_trace(args, cfg)
    points = _sweep_points(args, cfg)
    out = _out_dir(args)
    rows = []
    for pt in points:
        spec = cfg.cluster_spec(pt["method"])
        if "policy" in pt:
            spec = ClusterSpec(**{**spec.__dict__, "policy": pt["policy"]})
        run = trace if pt["rate"] is None else scale_to_rate(trace, pt["rate"])
        report = run_trace(spec, cfg.model, cfg.hardware, cfg.slo, run)
        agg = report.aggregates
        rows.append({
            "point": pt["label"],
            "attainment": agg["slo_attainment"],
            "throughput_rps": agg["throughput_rps"],
            "ttft_p95_s": agg["ttft_percentiles_s"].get("p95", ""),
            "tbt_p95_s": agg["tbt_percentiles_s"].get("p95", ""),
        })
    path = out / f"sweep_{args.axis}.csv"
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(f"{row['point']:<24} attainment={row['attainment']:.4f} "
              f"throughput={row['throughput_rps']:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_budgets(args) -> int:
    cfg = _load(args)
    rows = []
    for itype in ALL_INSTANCE_TYPES:
        cap = derive_latency_cap(itype, cfg.slo, cfg.alpha)
        b = search_budgets(
            cap, cfg.model, cfg.hardware,
            ceilings=(cfg.token_budget_ceiling, cfg.image_budget_ceiling),
            has_language=itype.can_prefill or itype.can_decode,
            has_encode=itype.can_encode,
            vision_cap_share=cfg.vision_cap_share)
        rows.append({"type": itype.name, "token_budget": b.token_budget,
                     "image_budget": b.image_budget, "feasible": b.feasible})
    if args.json:
        print(json.dumps(rows, sort_keys=True))
    else:
        print(f"{'type':<6} {'tokens':>8} {'images':>8} feasible")
        for row in rows:
            print(f"{row['type']:<6} {row['token_budget']:>8} "
                  f"{row['image_budget']:>8} {row['feasible']}")
    return EXIT_OK


def cmd_validate_trace(args) -> int:
    cfg = _load(args) if args.config else None
    path = Path(args.trace or "")
    if not args.trace or not path.exists():
        raise ConfigError(f"trace file not found: {args.trace}")
    trace = load_trace(path, default_slo=cfg.slo if cfg else None)
    print(f"ok: {len(trace)} requests")
    return EXIT_OK


def cmd_convert_trace(args) -> int:
    cfg = _load(args) if args.config else None
    trace = convert_csv_trace(args.input, args.output,
                              default_slo=cfg.slo if cfg else None)
    print(f"wrote {args.output}: {len(trace)} requests")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epdsim",
        description="Discrete-event simulator for disaggregated "
                    "multimodal LLM serving clusters.")
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--trace", help="JSONL trace file")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed echoed into reports")
    parser.add_argument("--out", help="output directory (default: cwd)")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable output on stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("replay", help="simulate one trace replay")
    p.add_argument("--check-invariants", action="store_true")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("goodput", help="bisect the maximum SLO-meeting rate")
    p.add_argument("--rate-min", type=float, default=0.1)
    p.add_argument("--rate-max", type=float, default=16.0)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_goodput)

    p = sub.add_parser("profile", help="choose a disaggregation method")
    p.add_argument("--n", type=int, help="cluster size (default from config)")
    p.add_argument("--brute-force", action="store_true")
    p.add_argument("--rate-min", type=float, default=0.1)
    p.add_argument("--rate-max", type=float, default=16.0)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("sweep", help="grid of simulations over one axis")
    p.add_argument("--axis", required=True,
                   choices=("instance_ratio", "request_rate",
                            "scheduler_policy"))
    p.add_argument("--n", type=int)
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--rate-min", type=float, default=1.0)
    p.add_argument("--rate-max", type=float, default=8.0)
    p.add_argument("--rate-step", type=float, default=1.0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("budgets", help="per-instance-type batch budgets")
    p.set_defaults(func=cmd_budgets)

    p = sub.add_parser("validate-trace", help="check a trace file")
    p.set_defaults(func=cmd_validate_trace)

    p = sub.add_parser("convert-trace", help="convert a CSV trace to JSONL")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_convert_trace)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
