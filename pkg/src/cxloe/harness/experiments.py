"""Experiment drivers: latency breakdown, congestion sweeps, cache study, reliability.

Each driver builds its scenarios from a base config plus dotted-key
overrides, runs them, checks every run against the memory oracle and returns
plain rows. ``out_dir`` (optional) receives the CSVs and SVG plots.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..cache import Op
from ..cn import PART_NAMES, Backend, ServedBy, even_samples, write_payload
from .config import ScenarioConfig, apply
from .scenario import RunResult, run_scenario
from . import plot


class OracleMismatch(AssertionError):
    """A run's memory contents disagree with the flat-map replay."""


def configure(overrides: dict, base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    config = base or ScenarioConfig()
    for key, value in overrides.items():
        config = apply(config, key, str(value))
    return config


def checked(result: RunResult, label: str) -> RunResult:
    if result.oracle is None or not result.oracle.passed:
        raise OracleMismatch(f"{label}: {result.oracle.as_dict() if result.oracle else 'no verdict'}")
    return result


def write_csv(path: str, header: list, rows: Iterable) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else v


# -- latency breakdown -------------------------------------------------------

# Closed-loop depth for each latency run. The write run saturates the request
# link and the read run the response link; these depths put the queueing on
# those links where the measured averages sit.
WRITE_OUTSTANDING = 256
READ_OUTSTANDING = 128
MIXED_OUTSTANDING = 256

LATENCY_RUNS = {
    "write": {"workload.read_ratio": 0, "workload.outstanding": WRITE_OUTSTANDING},
    "read": {"workload.read_ratio": 1, "workload.outstanding": READ_OUTSTANDING},
    "mixed": {"workload.read_ratio": 0.5, "workload.outstanding": MIXED_OUTSTANDING},
    # every request after the cold fills hits a 16 KB working set
    "all_hit": {"workload.read_ratio": 0.5, "workload.outstanding": MIXED_OUTSTANDING,
                "workload.pattern": "sequential", "workload.footprint_bytes": 16384,
                "cache.enabled": "true"},
}


@dataclass
class LatencySummary:
    write_avg_ns: float
    read_avg_ns: float
    be_fraction: float  # sum(b+e) / sum(total) over the write and read runs
    mixed_host_avg_ns: float
    all_hit_host_avg_ns: float
    results: dict = field(default_factory=dict, repr=False)


def exp_latency_breakdown(request_count: int = 10_000, base: Optional[ScenarioConfig] = None,
                          out_dir: Optional[str] = None) -> LatencySummary:
    results = {}
    for name, overrides in LATENCY_RUNS.items():
        cfg = configure({"workload.request_count": request_count, "cache.enabled": "false",
                         **overrides}, base)
        results[name] = checked(run_scenario(cfg), f"latency/{name}")
    w, r = results["write"], results["read"]
    be = total = 0
    for rec in w.records + r.records:
        parts = rec.parts()
        be += parts[1] + parts[4]
        total += rec.total
    # measured after warm-up: requests issued once the last cold fill has completed
    warm = results["all_hit"].records
    warm_at = max((r.t_complete for r in warm if r.served_by is not ServedBy.CACHE_HIT), default=0)
    hits = [r.total for r in warm if r.t_issue >= warm_at and r.served_by is ServedBy.CACHE_HIT]
    host = results["all_hit"].config.cn.host_path_ns
    summary = LatencySummary(
        write_avg_ns=w.latency["total"]["avg"],
        read_avg_ns=r.latency["total"]["avg"],
        be_fraction=be / total,
        mixed_host_avg_ns=results["mixed"].latency["host_total"]["avg"],
        all_hit_host_avg_ns=sum(hits) / len(hits) + host,
        results=results,
    )
    if out_dir:
        header = ["run", "req_id"] + [f"{p}_ns" for p in PART_NAMES] + ["total_ns"]
        rows = []
        for name in ("write", "read"):
            for rec in even_samples(results[name].records, 11):
                rows.append([name, rec.req_id, *rec.parts(), rec.total])
        write_csv(os.path.join(out_dir, "latency_samples.csv"), header, rows)
        summ = []
        for name, res in results.items():
            lat = res.latency
            summ.append([name] + [lat[p]["avg"] for p in PART_NAMES]
                        + [lat["total"]["avg"], lat["host_total"]["avg"]])
        write_csv(os.path.join(out_dir, "latency_summary.csv"),
                  ["run"] + [f"{p}_avg_ns" for p in PART_NAMES] + ["total_avg_ns", "host_avg_ns"], summ)
        for name in ("write", "read"):
            samples = even_samples(results[name].records, 11)
            plot.stacked_bars(os.path.join(out_dir, f"latency_{name}.svg"),
                              [str(s.req_id) for s in samples],
                              {p: [s.parts()[i] for s in samples] for i, p in enumerate(PART_NAMES)},
                              title=f"{name} latency parts (ns)")
    return summary


# -- congestion --------------------------------------------------------------

CONGESTION = {
    "workload.read_ratio": 0,
    "workload.request_count": 10**9,
    "workload.outstanding": 512,
    "dram.stall_period_ns": 4000,
    "dram.stall_duration_ns": 768,
    "run.duration_us": 1000,
}
THRESHOLDS = (30, 50, 70, 90, 105)
INITIAL_RATES_GBPS = (40, 60, 80, 100)
FIG12_THRESHOLD = 50
# naive pause baseline: each PFC pauses for 400 quanta (about 2 us at 100 Gbps)
PAUSE_BASELINE = {"cc.enabled": "false", "cc.pfc_mode": "pause", "mn.pfc_pause_quanta": 400}


@dataclass
class CongestionRow:
    threshold: int
    initial_rate_gbps: Optional[float]
    mode: str
    first_stable_gbps: Optional[float]
    final_stable_gbps: Optional[float]
    pfc_count: int
    throughput_gbps: float
    fifo_peak: int

    @property
    def gap(self) -> Optional[float]:
        if self.first_stable_gbps is None or not self.final_stable_gbps:
            return None
        return abs(self.first_stable_gbps - self.final_stable_gbps) / self.final_stable_gbps


CONGESTION_HEADER = ["threshold", "initial_rate_gbps", "mode", "first_stable_gbps",
                     "final_stable_gbps", "pfc_count", "throughput_gbps", "fifo_peak"]


def _congestion_run(threshold: int, initial_rate: Optional[float], extra: dict,
                    base: Optional[ScenarioConfig], duration_us: Optional[int]) -> tuple[CongestionRow, RunResult]:
    overrides = dict(CONGESTION, **{"mn.pfc_threshold": threshold}, **extra)
    if initial_rate is not None:
        overrides["cc.initial_rate_gbps"] = initial_rate
    if duration_us is not None:
        overrides["run.duration_us"] = duration_us
    res = checked(run_scenario(configure(overrides, base)), f"congestion/{threshold}")
    mode = "cc" if res.config.cn.cc_enabled else res.config.cn.pfc_mode
    row = CongestionRow(threshold, initial_rate, mode, res.first_stable_gbps, res.final_stable_gbps,
                        res.pfc_count, res.throughput_gbps, res.fifo_peak)
    return row, res


def _row(r: CongestionRow) -> list:
    return [r.threshold, r.initial_rate_gbps, r.mode, r.first_stable_gbps, r.final_stable_gbps,
            r.pfc_count, r.throughput_gbps, r.fifo_peak]


def exp_congestion_sweep(thresholds=THRESHOLDS, base: Optional[ScenarioConfig] = None,
                         out_dir: Optional[str] = None, duration_us: Optional[int] = None) -> list[CongestionRow]:
    rows, runs = [], []
    for th in thresholds:
        row, res = _congestion_run(th, None, {}, base, duration_us)
        rows.append(row)
        runs.append(res)
    if out_dir:
        write_csv(os.path.join(out_dir, "congestion_sweep.csv"), CONGESTION_HEADER, map(_row, rows))
        plot.lines(os.path.join(out_dir, "congestion_sweep.svg"),
                   {"first": [(r.threshold, r.first_stable_gbps or 0) for r in rows],
                    "final": [(r.threshold, r.final_stable_gbps or 0) for r in rows]},
                   title="stable rate (Gbps) by FIFO threshold")
    return rows


def exp_initial_rate_sweep(initial_rates=INITIAL_RATES_GBPS, threshold: int = FIG12_THRESHOLD,
                           base: Optional[ScenarioConfig] = None, out_dir: Optional[str] = None,
                           duration_us: Optional[int] = None, baseline: bool = True) -> list[CongestionRow]:
    rows, series = [], {}
    for rate in initial_rates:
        row, res = _congestion_run(threshold, rate, {}, base, duration_us)
        rows.append(row)
        series[f"cc {rate}G"] = res.throughput
    if baseline:
        row, res = _congestion_run(threshold, None, PAUSE_BASELINE, base, duration_us)
        rows.append(row)
        series["pause"] = res.throughput
    if out_dir:
        write_csv(os.path.join(out_dir, "initial_rate_sweep.csv"), CONGESTION_HEADER, map(_row, rows))
        write_csv(os.path.join(out_dir, "throughput_timeline.csv"), ["run", "t_ns", "gbps"],
                  ([name, t, g] for name, pts in series.items() for t, g in pts))
        plot.lines(os.path.join(out_dir, "throughput_timeline.svg"),
                   {k: [(t / 1000, g) for t, g in v] for k, v in series.items()},
                   title="request-link throughput (Gbps) over time (us)")
    return rows


# -- cache study -------------------------------------------------------------

SET_STRIDE = 128 * 64  # same cache set, next tag
CACHE_CASES = ("write_hit", "read_hit", "write_miss_no_replace", "write_miss_replace",
               "read_miss")
REPEATS = 16


def _case_ops(case: str, k: int) -> tuple[list, list[int]]:
    """Operation list for one instance of ``case`` in set ``k``; returns (ops, measured indices)."""
    a = k * 64
    lines = [a + i * SET_STRIDE for i in range(5)]
    w = lambda addr, i: (Op.WRITE, addr, write_payload(i))  # noqa: E731
    if case == "write_hit":
        return [w(a, 0), w(a, 1)], [1]
    if case == "read_hit":
        return [w(a, 0), (Op.READ, a, None)], [1]
    if case == "write_miss_no_replace":
        return [w(a, 0)], [0]
    if case == "write_miss_replace":
        # four dirty ways, then a fifth tag forces a dirty eviction
        return [w(x, i) for i, x in enumerate(lines)], [4]
    if case == "read_miss":
        return [(Op.READ, a, None)], [0]
    raise ValueError(case)


@dataclass
class CacheCase:
    case: str
    backend: str
    latency_ns: float
    cycles: float


def exp_cache_study(base: Optional[ScenarioConfig] = None, out_dir: Optional[str] = None,
                    repeats: int = REPEATS) -> list[CacheCase]:
    """Unloaded (one request at a time) latency of each cache outcome on both backends."""
    out = []
    for backend in (Backend.REMOTE, Backend.LOCAL):
        for case in CACHE_CASES:
            if backend is Backend.LOCAL and case not in ("write_miss_replace", "read_miss"):
                continue  # hits never leave the cache, so they do not depend on the backend
            ops, measured = [], []
            for k in range(repeats):
                o, m = _case_ops(case, k)
                measured += [len(ops) + i for i in m]
                ops += o
            cfg = configure({"cache.enabled": "true", "cn.backend": backend.value,
                             "workload.outstanding": 1, "workload.request_count": len(ops),
                             "run.region_bytes": 1 << 21}, base)
            res = checked(run_scenario(cfg, ops=ops), f"cache/{case}/{backend.value}")
            lat = [res.records[i].total for i in measured]
            avg = sum(lat) / len(lat)
            out.append(CacheCase(case, backend.value, avg, avg / 4))
    if out_dir:
        write_csv(os.path.join(out_dir, "cache_study.csv"), ["case", "backend", "latency_ns", "cycles"],
                  ([c.case, c.backend, c.latency_ns, c.cycles] for c in out))
    return out


def cache_ratios(cases: list[CacheCase]) -> tuple[float, float]:
    """(remote read miss / read hit, local read miss / read hit)."""
    by = {(c.case, c.backend): c.latency_ns for c in cases}
    hit = by[("read_hit", Backend.REMOTE.value)]
    return by[("read_miss", Backend.REMOTE.value)] / hit, by[("read_miss", Backend.LOCAL.value)] / hit


# -- reliability -------------------------------------------------------------

RELIABILITY = {"workload.request_count": 100_000}
FAULT_LEVELS = (0.0, 0.001, 0.01)


@dataclass
class ReliabilityRow:
    seed: int
    drop: float
    corrupt: float
    drained: bool
    oracle_passed: bool
    completed: int
    duplicate_completions: int
    losses: int  # request-link frames dropped or corrupted
    selective: int
    go_back_n: int
    response_retransmits: int


RELIABILITY_HEADER = ["seed", "drop", "corrupt", "drained", "oracle_passed", "completed",
                      "duplicate_completions", "losses", "selective_retransmits",
                      "go_back_n_retransmits", "response_retransmits"]


def reliability_run(seed: int, drop: float, corrupt: float, request_count: int = 100_000,
                    base: Optional[ScenarioConfig] = None) -> ReliabilityRow:
    cfg = configure({**RELIABILITY, "run.seed": seed, "workload.request_count": request_count,
                     "faults.drop_probability": drop, "faults.corrupt_probability": corrupt}, base)
    res = checked(run_scenario(cfg), f"reliability/seed{seed}")
    done = [r.req_id for r in res.records if r.t_complete >= 0]
    up = res.link_stats["up"]
    return ReliabilityRow(seed, drop, corrupt, res.drained, res.oracle.passed, len(done),
                          len(done) - len(set(done)), up["dropped"] + up["corrupted"],
                          res.cn_stats["retransmits"], res.cn_stats["gbn_equivalent"],
                          res.cn_stats["response_retransmits"])


def exp_reliability(seeds=range(1, 21), levels=FAULT_LEVELS, request_count: int = 100_000,
                    base: Optional[ScenarioConfig] = None, out_dir: Optional[str] = None) -> list[ReliabilityRow]:
    rows = [reliability_run(s, p, p, request_count, base) for p in levels for s in seeds]
    if out_dir:
        write_csv(os.path.join(out_dir, "reliability.csv"), RELIABILITY_HEADER,
                  ([r.seed, r.drop, r.corrupt, int(r.drained), int(r.oracle_passed), r.completed,
                    r.duplicate_completions, r.losses, r.selective, r.go_back_n,
                    r.response_retransmits] for r in rows))
    return rows


EXPERIMENTS = {
    "latency": exp_latency_breakdown,
    "congestion": exp_congestion_sweep,
    "initial-rate": exp_initial_rate_sweep,
    "cache": exp_cache_study,
    "reliability": exp_reliability,
}
