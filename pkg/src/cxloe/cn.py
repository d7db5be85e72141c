"""Compute node: workload, cache, request ARQ, rate control and latency stamps.

Requests flow ``issue -> cache -> egress queue -> wire``. Whatever has to go
remote becomes a :class:`NetOp`; its sequence number is bound when the wire
takes it, so the shared request sequence space follows send order.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Optional, TextIO

from . import wire
from .arq import ReorderBuffer, RetryBuffer, RxKind, UnknownSeq
from .cache import (Cache, CacheConfig, NeedFetch, NeedWritebackThenFetch, Op, ReadHit,
                    WriteAllocNoRemote, WriteHit, WriteReplace)
from .congctl import CcParams, CongestionController, TokenBucket
from .wire import Ack, Pfc, ReadResp, SackNak, WriteResp, pack_read_req, pack_write_req

LINE = 64


class UnmappedAddress(LookupError):
    pass


class UnknownReqSeq(RuntimeError):
    pass


class InflightViolation(AssertionError):
    pass


class Pattern(Enum):
    UNIFORM = "uniform"
    SEQUENTIAL = "sequential"
    HOTSPOT = "hotspot"


class Backend(Enum):
    REMOTE = "remote_ethernet"
    LOCAL = "local_fpga_dram"


class ServedBy(Enum):
    CACHE_HIT = "cache_hit"
    REMOTE = "remote"
    LOCAL_DRAM = "local_dram"


@dataclass
class WorkloadConfig:
    pattern: Pattern = Pattern.UNIFORM
    read_ratio: float = 0.5
    footprint_bytes: int = 1 << 20
    request_count: int = 10_000
    outstanding: int = 512  # closed-loop target; caps still apply per type
    issue_interval_ns: int = 0  # > 0 switches to open loop
    hotspot_fraction: float = 0.9
    hotspot_bytes: int = 16 << 10
    base_addr: int = 0

    def __post_init__(self):
        if isinstance(self.pattern, str):
            self.pattern = Pattern(self.pattern)
        if not 0.0 <= self.read_ratio <= 1.0:
            raise ValueError("read_ratio must be within [0, 1]")
        if self.footprint_bytes < LINE or self.footprint_bytes % LINE:
            raise ValueError("footprint must be a positive multiple of 64")
        if self.outstanding <= 0 or self.request_count < 0:
            raise ValueError("outstanding must be positive")
        if not 0.0 <= self.hotspot_fraction <= 1.0:
            raise ValueError("hotspot_fraction must be within [0, 1]")


def iter_ops(config: WorkloadConfig, rng) -> Iterator[tuple[Op, int, Optional[bytes]]]:
    """The logical request stream; a pure function of the config and RNG state."""
    lines = config.footprint_bytes // LINE
    hot = max(1, min(lines, config.hotspot_bytes // LINE))
    rand = rng.random
    for i in range(config.request_count):
        is_read = rand() < config.read_ratio
        p = config.pattern
        if p is Pattern.SEQUENTIAL:
            line = i % lines
        elif p is Pattern.UNIFORM:
            line = rng.randrange(lines)
        else:
            line = rng.randrange(hot) if rand() < config.hotspot_fraction else rng.randrange(lines)
        addr = config.base_addr + line * LINE
        if is_read:
            yield Op.READ, addr, None
        else:
            yield Op.WRITE, addr, write_payload(i)


def generate_ops(config: WorkloadConfig, rng) -> list[tuple[Op, int, Optional[bytes]]]:
    return list(iter_ops(config, rng))


def write_payload(req_id: int) -> bytes:
    return (req_id + 1).to_bytes(8, "big") * 8


@dataclass(slots=True)
class RequestRecord:
    req_id: int
    op: Op
    addr: int
    data: Optional[bytes]  # written data, or data the read returned
    t_issue: int = 0
    t_cn_mac_tx: int = 0
    t_mn_mac_rx: int = 0
    t_dram_done: int = 0
    t_mn_mac_tx: int = 0
    t_cn_mac_rx: int = 0
    t_complete: int = -1
    served_by: ServedBy = ServedBy.REMOTE

    def parts(self) -> tuple[int, int, int, int, int, int]:
        return (self.t_cn_mac_tx - self.t_issue, self.t_mn_mac_rx - self.t_cn_mac_tx,
                self.t_dram_done - self.t_mn_mac_rx, self.t_mn_mac_tx - self.t_dram_done,
                self.t_cn_mac_rx - self.t_mn_mac_tx, self.t_complete - self.t_cn_mac_rx)

    @property
    def total(self) -> int:
        return self.t_complete - self.t_issue

    def stamp_local(self, t_done: int, c_ns: int = 0) -> None:
        """Completion without the wire: all time lands in part a (and c for local DRAM)."""
        a_end = t_done - c_ns
        self.t_cn_mac_tx = self.t_mn_mac_rx = a_end
        self.t_dram_done = self.t_mn_mac_tx = self.t_cn_mac_rx = t_done
        self.t_complete = t_done


@dataclass
class CnConfig:
    mac: str = "02:00:00:00:00:01"
    cache_enabled: bool = False
    cache: CacheConfig = field(default_factory=CacheConfig)
    backend: Backend = Backend.REMOTE
    tx_prep_ns: int = 16  # request assembly before the MAC
    rx_done_ns: int = 8  # response hand-back after the MAC
    read_hit_ns: int = 64
    write_hit_ns: int = 56
    local_read_ns: int = 136
    local_write_ns: int = 88
    host_path_ns: int = 360
    max_reads: int = 256
    max_writes: int = 256
    rto_ns: int = 20_000
    cc_enabled: bool = True
    pfc_mode: str = "cc"  # cc | pause | ignore
    cc: CcParams = field(default_factory=CcParams)
    initial_rate_bps: Optional[int] = None
    bucket_bytes: int = 2 * 93

    def __post_init__(self):
        if isinstance(self.backend, str):
            self.backend = Backend(self.backend)
        if self.pfc_mode not in ("cc", "pause", "ignore"):
            raise ValueError(f"unknown pfc_mode {self.pfc_mode!r}")
        if self.max_reads <= 0 or self.max_writes <= 0:
            raise ValueError("inflight caps must be positive")
        if self.max_reads + self.max_writes > 512:
            raise ValueError("inflight caps exceed the 512-entry window")


class NetOp:
    """One request frame's worth of remote work."""

    __slots__ = ("nbytes", "is_read", "addr", "data", "rec", "role", "seq", "raw", "sent_at")

    def __init__(self, is_read: bool, addr: int, data, rec, role: str):
        self.nbytes = _RREQ_LEN if is_read else _WREQ_LEN
        self.is_read = is_read
        self.addr = addr
        self.data = data
        self.rec = rec
        self.role = role  # main | wb_block | wb_bg
        self.seq = None
        self.raw = None
        self.sent_at = 0


class Retx:
    __slots__ = ("nbytes", "op")

    def __init__(self, op: NetOp):
        self.nbytes = op.nbytes
        self.op = op


_RREQ_LEN = wire.wire_len(wire.ReadReq)
_WREQ_LEN = wire.wire_len(wire.WriteReq)


@dataclass
class CnStats:
    issued: int = 0
    completed: int = 0
    frames_sent: int = 0
    retransmits: int = 0  # request frames resent from the retry buffer
    gbn_equivalent: int = 0
    response_retransmits: int = 0  # requests re-sent to recover lost responses
    crc_errors: int = 0
    pfc_received: int = 0
    timeouts: int = 0
    background_writebacks: int = 0
    peak_reads: int = 0
    peak_writes: int = 0


class ComputeNode:
    name = "cn"

    def __init__(self, engine, config: CnConfig, ops: Iterable, region_bytes: Optional[int] = None,
                 workload: Optional[WorkloadConfig] = None):
        self.engine = engine
        self.config = config
        self.workload = workload or WorkloadConfig()
        self.mac = wire.mac(config.mac)
        self.peer_mac = bytes(6)
        self._ops = iter(ops)
        self._exhausted = False
        self.region_bytes = region_bytes
        self.records: list[RequestRecord] = []
        self.cache = Cache(config.cache) if config.cache_enabled else None
        self.retry = RetryBuffer(512, config.rto_ns)
        self.rob = ReorderBuffer()
        self.stats = CnStats()
        self.egress = None  # Link, wired by the scenario
        self.local_mem: dict[int, bytes] = {}
        self.cc: Optional[CongestionController] = None
        self.bucket: Optional[TokenBucket] = None
        if config.cc_enabled and config.backend is Backend.REMOTE:
            self.cc = CongestionController(config.cc, 0, config.initial_rate_bps)
            self.bucket = TokenBucket(config.bucket_bytes * 8, self.cc.current_rate(), 0)
        self._next = 0  # next op index to issue
        self._active = 0  # issued, not completed
        self._reads = 0  # remote reads in flight
        self._writes = 0
        self._blocked: deque = deque()  # NetOps waiting for an inflight slot
        self._out: dict[int, NetOp] = {}  # by request seq, sent and awaiting response
        self._net_pending = 0  # submitted to the link, response not yet delivered
        self._busy: dict[int, deque] = {}  # line -> requests waiting on its fetch
        self._held_reqs: set = set()
        self._last_req_seen: Optional[int] = None
        self._tick_armed = False
        self._flushing = False
        self.done_at: Optional[int] = None
        self.on_drained = None

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        if self.cc is not None:
            self._arm_cc()
        if self.workload.issue_interval_ns > 0:
            self.engine.schedule(self.engine.now, self._open_loop_tick)
        else:
            self._fill_window()

    def _pull(self) -> bool:
        op = next(self._ops, None)
        if op is None:
            self._exhausted = True
            return False
        self._issue(self._next, op)
        self._next += 1
        return True

    def _fill_window(self, _=None) -> None:
        limit = self.workload.outstanding
        while self._active < limit and not self._exhausted and self._pull():
            pass

    def _open_loop_tick(self, _=None) -> None:
        if self._exhausted:
            return
        if self._active < self.workload.outstanding and not self._pull():
            self._maybe_finish()
            return
        self.engine.after(self.workload.issue_interval_ns, self._open_loop_tick)

    @property
    def drained(self) -> bool:
        return self._exhausted and self._active == 0

    # -- issue path ----------------------------------------------------------

    def _issue(self, i: int, request) -> None:
        op, addr, data = request
        if addr % LINE:
            raise ValueError(f"request {i} address 0x{addr:x} is not line aligned")
        if self.region_bytes is not None and not 0 <= addr < self.region_bytes:
            raise UnmappedAddress(f"0x{addr:x} outside the {self.region_bytes}-byte region")
        now = self.engine.now
        rec = RequestRecord(i, op, addr, data, now)
        self.records.append(rec)
        self._active += 1
        self.stats.issued += 1
        self._dispatch(rec)

    def _dispatch(self, rec: RequestRecord) -> None:
        cfg = self.config
        now = self.engine.now
        is_read = rec.op is Op.READ
        if self.cache is None:
            if cfg.backend is Backend.LOCAL:
                cost = cfg.local_read_ns if is_read else cfg.local_write_ns
                self.engine.schedule(now + cost, self._complete_local, (rec, cost, ServedBy.LOCAL_DRAM))
                return
            self._net(NetOp(is_read, rec.addr, rec.data, rec, "main"), now + cfg.tx_prep_ns)
            return
        line = rec.addr
        waiters = self._busy.get(line)
        if waiters is not None:
            waiters.append(rec)
            return
        lookup = cfg.read_hit_ns if is_read else cfg.write_hit_ns
        out = self.cache.access(rec.op, line, rec.data)
        cls = type(out)
        if cls is ReadHit:
            rec.data = out.data
            self.engine.schedule(now + lookup, self._complete_local, (rec, 0, ServedBy.CACHE_HIT))
        elif cls is WriteHit or cls is WriteAllocNoRemote:
            self.engine.schedule(now + lookup, self._complete_local, (rec, 0, ServedBy.CACHE_HIT))
        elif cls is NeedFetch or cls is NeedWritebackThenFetch:
            self._busy[line] = deque()
            if cfg.backend is Backend.LOCAL:
                cost = cfg.local_read_ns
                if cls is NeedWritebackThenFetch:
                    self.local_mem[out.evicted_addr] = out.evicted_data
                    cost += cfg.local_write_ns
                self.engine.schedule(now + lookup + cost, self._complete_local_fill, (rec, cost))
                return
            ready = now + lookup + cfg.tx_prep_ns
            if cls is NeedWritebackThenFetch:
                self._net(NetOp(False, out.evicted_addr, out.evicted_data, None, "wb_bg"), ready)
                self.stats.background_writebacks += 1
            self._net(NetOp(True, line, None, rec, "main"), ready)
        else:  # WriteReplace
            if out.evicted_data is None:
                self.engine.schedule(now + lookup, self._complete_local, (rec, 0, ServedBy.CACHE_HIT))
            elif cfg.backend is Backend.LOCAL:
                self.local_mem[out.evicted_addr] = out.evicted_data
                cost = cfg.local_write_ns
                self.engine.schedule(now + lookup + cost, self._complete_local,
                                     (rec, cost, ServedBy.LOCAL_DRAM))
            else:
                self._net(NetOp(False, out.evicted_addr, out.evicted_data, rec, "wb_block"),
                          now + lookup + cfg.tx_prep_ns)

    def _net(self, op: NetOp, ready_at: int) -> None:
        self._net_pending += 1
        if self._blocked or not self._has_slot(op):
            self._blocked.append((op, ready_at))
            return
        self._take_slot(op)
        self.egress.send(op, ready_at)

    def _has_slot(self, op: NetOp) -> bool:
        if op.is_read:
            return self._reads < self.config.max_reads
        return self._writes < self.config.max_writes

    def _take_slot(self, op: NetOp) -> None:
        st = self.stats
        if op.is_read:
            self._reads += 1
            if self._reads > st.peak_reads:
                st.peak_reads = self._reads
        else:
            self._writes += 1
            if self._writes > st.peak_writes:
                st.peak_writes = self._writes
        if self._reads > self.config.max_reads or self._writes > self.config.max_writes:
            raise InflightViolation(f"{self._reads} reads / {self._writes} writes in flight")

    def _release_slot(self, op: NetOp) -> None:
        if op.is_read:
            self._reads -= 1
        else:
            self._writes -= 1
        blocked = self._blocked
        while blocked and self._has_slot(blocked[0][0]):
            nxt, ready = blocked.popleft()
            self._take_slot(nxt)
            self.egress.send(nxt, max(ready, self.engine.now))

    # -- wire ----------------------------------------------------------------

    def build(self, item, now: int):
        if type(item) is Retx:
            op = item.op
            op.sent_at = now
            self.retry.mark_sent(op.seq, now)
            return op.raw, None, op.seq
        op = item
        retry = self.retry
        seq = retry.next_seq
        if op.is_read:
            raw = pack_read_req(self.mac, self.peer_mac, seq, seq & 0xFF, op.addr)
        else:
            raw = pack_write_req(self.mac, self.peer_mac, seq, seq & 0xFF, op.addr, op.data)
        retry.record(seq, raw, now)
        op.seq = seq
        op.raw = raw
        op.sent_at = now
        self._out[seq] = op
        self.stats.frames_sent += 1
        if not self._tick_armed:
            self._tick_armed = True
            self.engine.schedule(now + self.config.rto_ns // 4, self._tick)
        return raw, None, seq

    def _resend(self, op: NetOp) -> None:
        self.egress.send(Retx(op), self.engine.now)

    def on_packet(self, pkt) -> None:
        try:
            frame = wire.decode(pkt.raw)
        except wire.DecodeError:
            self.stats.crc_errors += 1
            return
        cls = type(frame)
        if cls is ReadResp or cls is WriteResp:
            self.retry.on_ack(frame.cum_ack)
            self._on_response(frame, pkt)
        elif cls is Ack:
            self.retry.on_ack(frame.cum_ack)
        elif cls is SackNak:
            try:
                resend = self.retry.on_sack_nak(frame.sack, frame.nak, frame.ack)
            except UnknownSeq:
                resend = ()
            self._resend_seqs(resend)
        elif cls is Pfc:
            self._on_pfc(frame)

    def _resend_seqs(self, seqs) -> None:
        out = self._out
        for s in seqs:
            op = out.get(s)
            if op is not None:
                self.stats.retransmits += 1
                self._resend(op)
        self.stats.gbn_equivalent = self.retry.gbn_equivalent

    def _on_response(self, frame, pkt) -> None:
        r = self.rob.on_frame(frame.resp_seq, True, (frame, pkt))
        kind = r.kind
        if kind is RxKind.DELIVER:
            for _, (f, p) in r.delivered:
                self._held_reqs.discard(f.req_seq)
                self._note_seen(f.req_seq)
                self._deliver(f, p)
        elif kind is RxKind.GAP or kind is RxKind.HELD:
            req = frame.req_seq
            if kind is RxKind.GAP:
                lo = self._last_req_seen
                # responses retire in request order, so every outstanding
                # request between the last response seen and this one lost its answer
                out = self._out
                if lo is None:
                    cands = [s for s in out if wire.seq_diff(s, req) < 0]
                else:
                    cands = [(lo + k) & 0xFFFF for k in range(1, wire.seq_diff(req, lo))]
                for s in cands:
                    op = out.get(s)
                    if op is not None and s not in self._held_reqs:
                        self.stats.response_retransmits += 1
                        self._resend(op)
            self._held_reqs.add(req)
            self._note_seen(req)

    def _note_seen(self, req: int) -> None:
        last = self._last_req_seen
        if last is None or wire.seq_diff(req, last) > 0:
            self._last_req_seen = req

    def _deliver(self, frame, pkt) -> None:
        op = self._out.pop(frame.req_seq, None)
        if op is None:
            raise UnknownReqSeq(f"response for request seq {frame.req_seq}")
        if op.is_read is not (type(frame) is ReadResp):
            raise UnknownReqSeq(f"response type does not match request seq {frame.req_seq}")
        now = self.engine.now
        cn_tx, mn_rx, dram_done, mn_tx = pkt.meta
        t_done = now + self.config.rx_done_ns
        self._net_pending -= 1
        self._release_slot(op)
        rec = op.rec
        if op.role == "wb_bg":
            self._maybe_finish()
            return
        rec.t_cn_mac_tx = cn_tx
        rec.t_mn_mac_rx = mn_rx
        rec.t_dram_done = dram_done
        rec.t_mn_mac_tx = mn_tx
        rec.t_cn_mac_rx = now
        rec.t_complete = t_done
        rec.served_by = ServedBy.REMOTE
        if op.is_read:
            rec.data = frame.data
            if self.cache is not None:
                self._fill(rec.addr, frame.data)
        self.engine.schedule(t_done, self._finish, rec)

    def _fill(self, addr: int, data: bytes) -> None:
        evicted = self.cache.fill(addr, data)
        if evicted is not None and evicted[1] is not None:
            self.stats.background_writebacks += 1
            if self.config.backend is Backend.LOCAL:
                self.local_mem[evicted[0]] = evicted[1]
            else:
                self._net(NetOp(False, evicted[0], evicted[1], None, "wb_bg"),
                          self.engine.now + self.config.tx_prep_ns)

    def _complete_local(self, args) -> None:
        rec, c_ns, served = args
        now = self.engine.now
        if served is ServedBy.LOCAL_DRAM and self.cache is None:
            if rec.op is Op.READ:
                rec.data = self.local_mem.get(rec.addr, bytes(LINE))
            else:
                self.local_mem[rec.addr] = rec.data
        rec.served_by = served
        rec.stamp_local(now, c_ns)
        self._finish(rec)

    def _complete_local_fill(self, args) -> None:
        rec, c_ns = args
        data = self.local_mem.get(rec.addr, bytes(LINE))
        rec.data = data
        self._fill(rec.addr, data)
        rec.served_by = ServedBy.LOCAL_DRAM
        rec.stamp_local(self.engine.now, c_ns)
        self._finish(rec)

    def _finish(self, rec: RequestRecord) -> None:
        self._active -= 1
        self.stats.completed += 1
        if self.cache is not None and rec.op is Op.READ:
            waiters = self._busy.get(rec.addr)
            if waiters is not None and rec.served_by is not ServedBy.CACHE_HIT:
                del self._busy[rec.addr]
                for w in waiters:
                    self._dispatch(w)
        if self.workload.issue_interval_ns <= 0:
            self._fill_window()
        if self._exhausted:
            self._maybe_finish()

    def _maybe_finish(self) -> None:
        if self.drained and not self._net_pending:
            if self.cache is not None and not self._flushing:
                self._flushing = True
                self._flush()
                if self._net_pending:
                    return
            if self.done_at is None:
                self.done_at = self.engine.now
                if self.on_drained is not None:
                    self.on_drained()

    def _flush(self) -> None:
        """Push every dirty line home so the pool can be checked against the oracle."""
        dirty = self.cache.flush()
        if self.config.backend is Backend.LOCAL:
            self.local_mem.update(dirty)
            return
        for addr, data in dirty:
            self._net(NetOp(False, addr, data, None, "wb_bg"), self.engine.now + self.config.tx_prep_ns)

    # -- timers --------------------------------------------------------------

    def _tick(self, _=None) -> None:
        now = self.engine.now
        self._tick_armed = False
        if not self._out:
            return
        expired = self.retry.on_timeout(now)
        if expired:
            self.stats.timeouts += len(expired)
            self._resend_seqs(expired)
        rto = self.config.rto_ns
        retry = self.retry
        held = self._held_reqs
        for s, op in self._out.items():
            if s not in retry and s not in held and op.sent_at + rto <= now:
                # acknowledged but the response never came
                self.stats.timeouts += 1
                self.stats.response_retransmits += 1
                op.sent_at = now
                self._resend(op)
        self._tick_armed = True
        self.engine.schedule(now + rto // 4, self._tick)

    # -- congestion ----------------------------------------------------------

    def _arm_cc(self) -> None:
        cc = self.cc
        self.engine.schedule(cc.state.deadline, self._cc_deadline, cc.generation)

    def _cc_deadline(self, generation: int) -> None:
        cc = self.cc
        if generation != cc.generation:
            return
        now = self.engine.now
        cc.on_deadline(now)
        self.bucket.set_rate(cc.current_rate(), now)
        self._arm_cc()
        self.egress.kick()

    def _on_pfc(self, frame: Pfc) -> None:
        now = self.engine.now
        self.stats.pfc_received += 1
        mode = self.config.pfc_mode
        if mode == "cc" and self.cc is not None:
            if self.cc.on_pfc(now):
                self.bucket.set_rate(self.cc.current_rate(), now)
                self._arm_cc()
        elif mode == "pause":
            quanta = frame.pause_quanta or 0xFFFF
            bit_ns = 10**9 / self.egress.config.rate_bps
            self.egress.pause(now + math.ceil(quanta * 512 * bit_ns))

    def gate(self, nbytes: int, now: int):
        return self.bucket.acquire(nbytes, now)


# -- reporting ---------------------------------------------------------------

PART_NAMES = ("a", "b", "c", "d", "e", "f")
CSV_HEADER = ["req_id", "op", "served_by"] + [f"{p}_ns" for p in PART_NAMES] + ["total_ns", "host_total_ns"]


def write_latency_csv(records, host_path_ns: int, out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        parts = r.parts()
        w.writerow([r.req_id, r.op.value, r.served_by.value, *parts, r.total, r.total + host_path_ns])


def _summary(values: list[int]) -> dict:
    if not values:
        return {"count": 0}
    v = sorted(values)
    n = len(v)

    def pct(q):
        return v[min(n - 1, int(q * (n - 1) + 0.5))]

    return {"count": n, "min": v[0], "avg": sum(v) / n, "p50": pct(0.5), "p90": pct(0.9),
            "p99": pct(0.99), "max": v[-1]}


def latency_report(records, host_path_ns: int) -> dict:
    """Per-part and total aggregates; host-level totals add the host path constant."""
    done = [r for r in records if r.t_complete >= 0]
    cols = list(zip(*(r.parts() for r in done))) if done else [[] for _ in PART_NAMES]
    totals = [r.total for r in done]
    rep = {name: _summary(list(col)) for name, col in zip(PART_NAMES, cols)}
    rep["total"] = _summary(totals)
    rep["host_total"] = _summary([t + host_path_ns for t in totals])
    rep["served_by"] = {s.value: sum(1 for r in done if r.served_by is s) for s in ServedBy}
    return rep


def even_samples(records, n: int = 11) -> list:
    """``n`` evenly spaced requests in issue order (first and last included)."""
    if not records:
        return []
    if len(records) <= n:
        return list(records)
    step = (len(records) - 1) / (n - 1)
    return [records[round(i * step)] for i in range(n)]
