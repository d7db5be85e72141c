"""Command line entry point.

Exit status: 0 when every run passes the oracle, 2 on an oracle failure,
1 on a configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import itertools
import json
import os
import sys
from typing import Optional

from .config import ConfigError, apply, documented_keys, load_config
from .oracle import verify_run_dir
from .scenario import RunResult, Scenario, write_artifacts

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE = 0, 1, 2


def _summary(result: RunResult) -> dict:
    lat = result.latency["total"]
    return {
        "seed": result.config.seed,
        "drained": result.drained,
        "end_ns": result.end_ns,
        "completed": lat.get("count", 0),
        "avg_latency_ns": lat.get("avg"),
        "throughput_gbps": round(result.throughput_gbps, 3),
        "pfc_count": result.pfc_count,
        "first_stable_gbps": result.first_stable_gbps,
        "final_stable_gbps": result.final_stable_gbps,
        "retransmits": result.cn_stats["retransmits"],
        "go_back_n_equivalent": result.cn_stats["gbn_equivalent"],
        "oracle": result.oracle.as_dict(),
    }


def _run_one(config, trace_path: Optional[str], out_dir: str) -> RunResult:
    with contextlib.ExitStack() as stack:
        trace = stack.enter_context(open(trace_path, "w")) if trace_path else None
        result = Scenario(config, trace).run()
    write_artifacts(result, out_dir)
    return result


def _default_dir(config_path: str, seed: int) -> str:
    stem = os.path.splitext(os.path.basename(config_path))[0]
    return os.path.join("runs", f"{stem}-seed{seed}")


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = apply(config, "run.seed", str(args.seed))
    out_dir = args.csv_dir or _default_dir(args.config, config.seed)
    result = _run_one(config, args.trace, out_dir)
    print(json.dumps(_summary(result), indent=2, default=str))
    print(f"artifacts: {out_dir}")
    return EXIT_OK if result.oracle.passed else EXIT_ORACLE


def _parse_vary(specs: list[str]) -> list[tuple[str, list[str]]]:
    out = []
    for spec in specs:
        key, sep, values = spec.partition("=")
        if not sep or not values:
            raise ConfigError("expected key=v1,v2,...", spec)
        out.append((key.strip(), [v.strip() for v in values.split(",")]))
    return out


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    if args.seed is not None:
        base = apply(base, "run.seed", str(args.seed))
    axes = _parse_vary(args.vary)
    combos = []
    for values in itertools.product(*(vals for _, vals in axes)):
        config = base
        for (key, _), value in zip(axes, values):
            config = apply(config, key, value)  # reject bad keys before running anything
        combos.append((values, config))
    root = args.csv_dir or _default_dir(args.config, base.seed) + "-sweep"
    rows, status = [], EXIT_OK
    for values, config in combos:
        label = ",".join(f"{k}={v}" for (k, _), v in zip(axes, values))
        result = _run_one(config, None, os.path.join(root, label.replace("/", "_")))
        s = _summary(result)
        rows.append([*values, s["completed"], s["avg_latency_ns"], s["throughput_gbps"], s["pfc_count"],
                     s["first_stable_gbps"], s["final_stable_gbps"], s["retransmits"],
                     s["go_back_n_equivalent"], int(result.oracle.passed)])
        print(f"{label}: avg={s['avg_latency_ns']} tput={s['throughput_gbps']} "
              f"final={s['final_stable_gbps']} oracle={'pass' if result.oracle.passed else 'FAIL'}")
        if not result.oracle.passed:
            status = EXIT_ORACLE
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([k for k, _ in axes] + ["completed", "avg_latency_ns", "throughput_gbps", "pfc_count",
                                          "first_stable_gbps", "final_stable_gbps", "retransmits",
                                          "go_back_n_equivalent", "oracle_passed"])
        w.writerows(rows)
    return status


def cmd_verify(args) -> int:
    verdict = verify_run_dir(args.run_dir)
    print(json.dumps(verdict.as_dict(), indent=2))
    return EXIT_OK if verdict.passed else EXIT_ORACLE


def cmd_experiment(args) -> int:
    from . import experiments as ex
    out = args.csv_dir or os.path.join("runs", f"experiment-{args.name}")
    if args.name == "latency":
        s = ex.exp_latency_breakdown(out_dir=out)
        print(f"write avg {s.write_avg_ns:.0f} ns, read avg {s.read_avg_ns:.0f} ns, "
              f"(b+e) {s.be_fraction:.1%}, mixed host {s.mixed_host_avg_ns:.0f} ns, "
              f"all-hit host {s.all_hit_host_avg_ns:.0f} ns")
    elif args.name == "congestion":
        for r in ex.exp_congestion_sweep(out_dir=out):
            print(f"threshold {r.threshold}: first {r.first_stable_gbps} final {r.final_stable_gbps} "
                  f"pfc {r.pfc_count}")
    elif args.name == "initial-rate":
        for r in ex.exp_initial_rate_sweep(out_dir=out):
            print(f"{r.mode} initial {r.initial_rate_gbps}: final {r.final_stable_gbps} "
                  f"throughput {r.throughput_gbps:.1f}")
    elif args.name == "cache":
        cases = ex.exp_cache_study(out_dir=out)
        for c in cases:
            print(f"{c.case:24s} {c.backend:16s} {c.cycles:7.1f} cycles")
        remote, local = ex.cache_ratios(cases)
        print(f"read miss / read hit: remote {remote:.2f}x, local {local:.2f}x")
    else:
        seeds = range(args.seed or 1, (args.seed or 1) + args.seeds)
        for r in ex.exp_reliability(seeds=seeds, request_count=args.requests, out_dir=out):
            print(f"seed {r.seed} p={r.drop}: drained={r.drained} oracle={r.oracle_passed} "
                  f"selective={r.selective} gbn={r.go_back_n}")
    print(f"artifacts: {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cxloe", description="Memory disaggregation over Ethernet simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--csv-dir", help="artifact directory")

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("config")
    common(r)
    r.add_argument("--trace", help="write the event trace (time, target, payload kind) here")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a scenario once per value of one or more keys")
    s.add_argument("config")
    s.add_argument("--vary", action="append", required=True, metavar="KEY=V1,V2,...")
    common(s)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="re-check a run directory against the memory oracle")
    v.add_argument("run_dir")
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("experiment", help="run a built-in study")
    e.add_argument("name", choices=["latency", "congestion", "initial-rate", "cache", "reliability"])
    common(e)
    e.add_argument("--seeds", type=int, default=20, help="reliability: number of seeds")
    e.add_argument("--requests", type=int, default=100_000, help="reliability: requests per run")
    e.set_defaults(func=cmd_experiment)

    k = sub.add_parser("keys", help="list every config key")
    k.set_defaults(func=lambda a: print("\n".join(documented_keys())) or EXIT_OK)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    from .experiments import OracleMismatch
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OracleMismatch as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
