"""Wire a compute node and a memory node together and run one scenario."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..cache import Op
from ..cn import Backend, ComputeNode, RequestRecord, iter_ops, latency_report, write_latency_csv
from ..congctl import write_rate_trace
from ..fabric import Link
from ..mn import MemoryNode, dump_pool
from ..sim import Engine
from .config import ScenarioConfig
from .oracle import pool_checkable, verify_result
from .stable import stable_rates


@dataclass
class RunResult:
    config: ScenarioConfig
    records: list[RequestRecord]
    latency: dict
    cache_stats: Optional[dict]
    cn_stats: dict
    mn_stats: dict
    link_stats: dict
    rate_trace: list
    first_pfc_at: Optional[int]
    first_stable_gbps: Optional[float]
    final_stable_gbps: Optional[float]
    pfc_count: int
    fifo_peak: int
    end_ns: int
    drained: bool
    throughput_gbps: float
    pool: list = field(default_factory=list)  # [(pool_addr, line)]; CN-local DRAM for the local backend
    mapping: list = field(default_factory=list)  # [(cn_mac, cmem_page, pool_page)]
    page_bytes: int = 0
    events: int = 0
    throughput: list = field(default_factory=list)  # [(bin_start_ns, gbps)] on the request link
    oracle: Optional[object] = None

    def report(self) -> dict:
        return {
            "seed": self.config.seed,
            "end_ns": self.end_ns,
            "drained": self.drained,
            "events": self.events,
            "latency": self.latency,
            "cache": self.cache_stats,
            "cn": self.cn_stats,
            "mn": self.mn_stats,
            "link": self.link_stats,
            "pfc_count": self.pfc_count,
            "fifo_peak": self.fifo_peak,
            "first_pfc_at_ns": self.first_pfc_at,
            "first_stable_gbps": self.first_stable_gbps,
            "final_stable_gbps": self.final_stable_gbps,
            "throughput_gbps": self.throughput_gbps,
            "pool_checkable": pool_checkable(self),
            "backend": self.config.cn.backend.value,
            "oracle": None if self.oracle is None else self.oracle.as_dict(),
        }


class Scenario:
    """Builds the engine, both nodes and both link directions from a config."""

    def __init__(self, config: ScenarioConfig, trace=None, record_tx: bool = True, ops=None):
        self.config = config
        self.engine = eng = Engine(config.seed, trace)
        self.mn = MemoryNode(eng, config.mn)
        if ops is None:
            ops = iter_ops(config.workload, eng.rng("workload"))
        region = config.region_bytes or config.workload.base_addr + config.workload.footprint_bytes
        self.cn = ComputeNode(eng, config.cn, ops, region, config.workload)
        self.cn.peer_mac = self.mn.mac
        self.mn.peer_mac = self.cn.mac
        self.mn.gmm.alloc(self.cn.mac, region)
        gate = self.cn.gate if self.cn.bucket is not None else None
        self.up = Link(eng, config.link, self.mn.on_packet, self.cn.build, config.faults,
                       "cn_to_mn", gate)
        self.down = Link(eng, config.link, self.cn.on_packet, self.mn.build, config.faults,
                         "mn_to_cn")
        if record_tx:
            self.up.tx_log = []
        self.cn.egress = self.up
        self.mn.egress = self.down
        self.cn.on_drained = eng.stop

    def run(self) -> RunResult:
        cfg = self.config
        eng = self.engine
        self.cn.start()
        if cfg.duration_ns is not None:
            stats = eng.run_until(cfg.duration_ns)
        else:
            stats = eng.run()
        result = self._result(stats.processed)
        result.oracle = verify_result(result)
        return result

    def _result(self, events: int) -> RunResult:
        cn, mn, eng = self.cn, self.mn, self.engine
        end = eng.now
        trace = cn.cc.trace if cn.cc is not None else []
        first_pfc = cn.cc.pfc_accepted[0] if cn.cc is not None and cn.cc.pfc_accepted else None
        first, final = (None, None)
        if trace:
            first, final = stable_rates(trace, end, first_pfc)
        up = self.up.stats
        tput = up.bytes * 8 / end if end else 0.0
        return RunResult(
            config=self.config,
            records=cn.records,
            latency=latency_report(cn.records, self.config.cn.host_path_ns),
            cache_stats=asdict(cn.cache.stats()) if cn.cache is not None else None,
            cn_stats=asdict(cn.stats),
            mn_stats=asdict(mn.stats),
            link_stats={"up": asdict(up), "down": asdict(self.down.stats)},
            rate_trace=trace,
            first_pfc_at=first_pfc,
            first_stable_gbps=first,
            final_stable_gbps=final,
            pfc_count=mn.fifo.pfc_sent,
            fifo_peak=mn.fifo.peak,
            end_ns=end,
            drained=cn.done_at is not None,
            throughput_gbps=tput,
            pool=sorted(cn.local_mem.items()) if self.config.cn.backend is Backend.LOCAL else mn.snapshot(),
            mapping=[(c, p, m) for c, p, m in mn.gmm.table.entries()],
            page_bytes=mn.gmm.page_bytes,
            events=events,
            throughput=throughput_timeline(self.up.tx_log or [], end),
        )


def run_scenario(config: ScenarioConfig, trace=None, ops=None) -> RunResult:
    return Scenario(config, trace, ops=ops).run()


THROUGHPUT_BIN_NS = 1_000


def throughput_timeline(tx_log, end_ns: int, bin_ns: int = THROUGHPUT_BIN_NS) -> list[tuple[int, float]]:
    """Offered bits per bin from ``(start_ns, nbytes)`` transmissions, in Gbps."""
    nbins = end_ns // bin_ns + 1 if end_ns else 0
    bits = [0] * nbins
    for t, nbytes in tx_log:
        bits[min(t // bin_ns, nbins - 1)] += nbytes * 8
    return [(i * bin_ns, b / bin_ns) for i, b in enumerate(bits)]


# -- artifacts ---------------------------------------------------------------

def write_ops_csv(records, out) -> None:
    """The logical operation log the oracle replays: issue order, with data."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["req_id", "op", "addr", "data", "completed"])
    for r in records:
        w.writerow([r.req_id, r.op.value, f"0x{r.addr:x}", r.data.hex() if r.data else "",
                    int(r.t_complete >= 0)])


def read_ops_csv(fh) -> list[tuple[int, Op, int, Optional[bytes]]]:
    out = []
    for row in csv.DictReader(fh):
        data = bytes.fromhex(row["data"]) if row["data"] else None
        out.append((int(row["req_id"]), Op(row["op"]), int(row["addr"], 16), data,
                    row.get("completed", "1") == "1"))
    return out


def write_artifacts(result: RunResult, run_dir: str) -> dict[str, str]:
    """Write CSVs, the pool snapshot and the JSON report. Returns name -> path."""
    os.makedirs(run_dir, exist_ok=True)
    paths = {}

    def path(name):
        paths[name] = p = os.path.join(run_dir, name)
        return p

    with open(path("latency.csv"), "w", newline="") as fh:
        write_latency_csv(result.records, result.config.cn.host_path_ns, fh)
    with open(path("ops.csv"), "w", newline="") as fh:
        write_ops_csv(result.records, fh)
    if result.rate_trace:
        with open(path("rate_trace.csv"), "w", newline="") as fh:
            write_rate_trace(result.rate_trace, fh)
    with open(path("pool.bin"), "wb") as fh:
        dump_pool(result.pool, fh)
    with open(path("mapping.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cn_id", "cmem_page", "pool_page", "page_bytes"])
        for cn_id, cmem_page, pool_page in result.mapping:
            w.writerow([cn_id.hex(), cmem_page, pool_page, result.page_bytes])
    with open(path("throughput.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_ns", "gbps"])
        w.writerows(result.throughput)
    with open(path("report.json"), "w") as fh:
        json.dump(result.report(), fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return paths
