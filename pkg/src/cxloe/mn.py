"""Memory node: pool allocation, address translation, banked DRAM, RX FIFO.

The node receives request frames, hands them through the reorder buffer in
sequence order, translates the compute node's address into a pool address,
touches DRAM and answers in request order. Every response is kept in a
retry buffer so a re-received request can be answered without touching DRAM
again.
"""

from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .arq import PendingControl, ReorderBuffer, RxKind, compose_control
from .wire import (Ack, Pfc, ReadReq, ReadResp, SackNak, WriteResp, pack_ack, pack_read_resp,
                   pack_write_resp, seq_add, seq_diff, FLAG_ACK, FLAG_SACK)

MB = 1 << 20
LINE = 64
_MASK64 = (1 << 64) - 1


class OutOfPoolMemory(MemoryError):
    pass


class TranslationFault(LookupError):
    pass


class TranslationMismatch(AssertionError):
    pass


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _cn_int(cn_id: bytes) -> int:
    return int.from_bytes(cn_id, "big")


# -- page table and TLB ------------------------------------------------------

class PageTable:
    """Hash table in pool memory keyed by (cn_id, cmem page) with chaining."""

    def __init__(self, buckets: int = 1024):
        if buckets <= 0:
            raise ValueError("need at least one bucket")
        self._buckets: list[list] = [[] for _ in range(buckets)]
        self.size = 0

    def _bucket(self, cn_id: bytes, cmem_page: int) -> list:
        h = splitmix64((_cn_int(cn_id) << 16) ^ splitmix64(cmem_page))
        return self._buckets[h % len(self._buckets)]

    def insert(self, cn_id: bytes, cmem_page: int, mpmem_page: int) -> None:
        chain = self._bucket(cn_id, cmem_page)
        for entry in chain:
            if entry[0] == cn_id and entry[1] == cmem_page:
                raise ValueError(f"page {cmem_page} of {cn_id.hex()} already mapped")
        chain.append((cn_id, cmem_page, mpmem_page))
        self.size += 1

    def lookup(self, cn_id: bytes, cmem_page: int) -> Optional[int]:
        for c, p, m in self._bucket(cn_id, cmem_page):
            if p == cmem_page and c == cn_id:
                return m
        return None

    def entries(self) -> list[tuple[bytes, int, int]]:
        return sorted(e for chain in self._buckets for e in chain)

    def longest_chain(self) -> int:
        return max(len(c) for c in self._buckets)


class Tlb:
    """Fully associative, LRU."""

    def __init__(self, capacity: int = 64):
        if capacity <= 0:
            raise ValueError("TLB needs at least one entry")
        self.capacity = capacity
        self._map: OrderedDict = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._map)

    def __contains__(self, key) -> bool:
        return key in self._map

    def lookup(self, key) -> Optional[int]:
        m = self._map.get(key)
        if m is None:
            self.misses += 1
            return None
        self.hits += 1
        self._map.move_to_end(key)
        return m

    def insert(self, key, mpmem_page: int) -> None:
        self._map[key] = mpmem_page
        self._map.move_to_end(key)
        if len(self._map) > self.capacity:
            self._map.popitem(last=False)

    def keys(self) -> list:
        return list(self._map)


# -- global memory manager ---------------------------------------------------

@dataclass
class Region:
    cmem_base: int
    length: int
    mpmem_pages: list


class Gmm:
    """Allocates pool pages to compute nodes at page granularity.

    Each compute node sees one CMem space growing upward from 0; expansions
    append regions and never disturb existing mappings.
    """

    def __init__(self, pool_bytes: int, page_bytes: int = 2 * MB,
                 table: Optional[PageTable] = None):
        if page_bytes <= 0 or pool_bytes < page_bytes:
            raise ValueError("pool must hold at least one page")
        self.page_bytes = page_bytes
        self.pool_pages = pool_bytes // page_bytes
        self._free = deque(range(self.pool_pages))
        self.owner: dict[int, bytes] = {}
        self.records: dict[bytes, list[Region]] = {}
        self.table = table if table is not None else PageTable()

    @property
    def free_pages(self) -> int:
        return len(self._free)

    def _take(self, cn_id: bytes, nbytes: int) -> Region:
        if nbytes <= 0:
            raise ValueError("allocation must be positive")
        n = -(-nbytes // self.page_bytes)
        if n > len(self._free):
            raise OutOfPoolMemory(f"need {n} pages, {len(self._free)} free")
        regions = self.records.setdefault(cn_id, [])
        base = regions[-1].cmem_base + regions[-1].length if regions else 0
        pages = []
        for i in range(n):
            mp = self._free.popleft()
            if mp in self.owner:
                raise AssertionError(f"pool page {mp} handed out twice")
            self.owner[mp] = cn_id
            self.table.insert(cn_id, base // self.page_bytes + i, mp)
            pages.append(mp)
        region = Region(base, n * self.page_bytes, pages)
        regions.append(region)
        return region

    def alloc(self, cn_id: bytes, nbytes: int) -> Region:
        return self._take(cn_id, nbytes)

    def expand(self, cn_id: bytes, nbytes: int) -> Region:
        if cn_id not in self.records:
            raise KeyError(f"{cn_id.hex()} has no allocation to expand")
        return self._take(cn_id, nbytes)

    def allocated_bytes(self, cn_id: bytes) -> int:
        return sum(r.length for r in self.records.get(cn_id, ()))


class Translator:
    """CMem -> pool address through the TLB, falling back to a table walk.

    With ``verify`` set, every TLB hit is cross-checked against the table.
    """

    def __init__(self, gmm: Gmm, tlb: Tlb, verify: bool = False):
        self.gmm = gmm
        self.tlb = tlb
        self.verify = verify
        self.walks = 0
        self.faults = 0
        self._shift = gmm.page_bytes.bit_length() - 1
        if 1 << self._shift != gmm.page_bytes:
            raise ValueError("page size must be a power of two")

    def translate(self, cn_id: bytes, cmem_addr: int) -> tuple[int, bool]:
        """Returns ``(pool_addr, walked)``."""
        page = cmem_addr >> self._shift
        offset = cmem_addr & (self.gmm.page_bytes - 1)
        key = (cn_id, page)
        mp = self.tlb.lookup(key)
        walked = mp is None
        if walked:
            self.walks += 1
            mp = self.gmm.table.lookup(cn_id, page)
            if mp is None:
                self.faults += 1
                raise TranslationFault(f"{cn_id.hex()}:0x{cmem_addr:x} is unmapped")
            self.tlb.insert(key, mp)
        elif self.verify:
            ref = self.gmm.table.lookup(cn_id, page)
            if ref != mp:
                raise TranslationMismatch(f"TLB {mp} != table {ref} for {key}")
        return (mp << self._shift) | offset, walked


# -- DRAM --------------------------------------------------------------------

@dataclass(frozen=True)
class DramConfig:
    banks: int = 16
    t_access_ns: int = 48
    stall_period_ns: int = 0
    stall_duration_ns: int = 0

    def __post_init__(self):
        if self.banks <= 0 or self.banks & (self.banks - 1):
            raise ValueError("bank count must be a power of two")
        if self.t_access_ns <= 0:
            raise ValueError("t_access must be positive")
        if self.stall_duration_ns and not 0 < self.stall_duration_ns < self.stall_period_ns:
            raise ValueError("stall duration must be shorter than its period")


class Dram:
    """Per-bank FIFO service with row|column|bank address mapping.

    The bank is the lowest bank-bits of the line address, so consecutive lines
    interleave. Optional periodic stall windows (the last ``duration`` ns of
    every ``period``) defer the start of any service.
    """

    def __init__(self, config: DramConfig = DramConfig()):
        self.config = config
        self.bank_free = [0] * config.banks
        self.served = [0] * config.banks
        self._bank_mask = config.banks - 1
        self._period = config.stall_period_ns
        self._dur = config.stall_duration_ns

    def bank_of(self, addr: int) -> int:
        return (addr // LINE) & self._bank_mask

    def rcb(self, addr: int, columns: int = 128) -> tuple[int, int, int]:
        """(row, column, bank) decomposition of a pool address."""
        line = addr // LINE
        bank = line & self._bank_mask
        rest = line // self.config.banks
        return rest // columns, rest % columns, bank

    def release(self, t: int) -> int:
        """Earliest time >= t outside a stall window."""
        if not self._dur:
            return t
        phase = t % self._period
        start = self._period - self._dur
        if phase >= start:
            return t - phase + self._period
        return t

    def schedule(self, addr: int, now: int) -> int:
        b = (addr // LINE) & self._bank_mask
        start = self.release(max(now, self.bank_free[b]))
        done = start + self.config.t_access_ns
        self.bank_free[b] = done
        self.served[b] += 1
        return done


# -- RX FIFO -----------------------------------------------------------------

class FifoOverrun(RuntimeError):
    pass


class RxFifo:
    """Occupancy counter with PFC emission rules.

    A PFC goes out when occupancy reaches ``threshold`` while armed, and then
    at most once per ``min_gap_ns`` for as long as it stays at or above the
    threshold. The trigger re-arms once occupancy falls to
    ``threshold - hysteresis``.
    """

    def __init__(self, depth: int = 512, threshold: Optional[int] = None,
                 hysteresis: int = 4, min_gap_ns: int = 5_000):
        if depth <= 0:
            raise ValueError("depth must be positive")
        self.depth = depth
        self.threshold = depth if threshold is None else threshold
        if not 0 < self.threshold <= depth:
            raise ValueError("threshold must be within (0, depth]")
        self.hysteresis = hysteresis
        self.min_gap_ns = min_gap_ns
        self.occupancy = 0
        self.peak = 0
        self.overruns = 0
        self.pfc_sent = 0
        self._armed = True
        self.last_pfc_at: Optional[int] = None

    def _emit(self, now: int) -> bool:
        self._armed = False
        self.last_pfc_at = now
        self.pfc_sent += 1
        return True

    def push(self, now: int) -> bool:
        """Admit one frame; True when a PFC must be sent. Raises FifoOverrun when full."""
        if self.occupancy >= self.depth:
            self.overruns += 1
            raise FifoOverrun(f"depth {self.depth} exceeded")
        self.occupancy += 1
        if self.occupancy > self.peak:
            self.peak = self.occupancy
        return self.poll(now)

    def pop(self) -> None:
        self.occupancy -= 1
        if self.occupancy <= self.threshold - self.hysteresis:
            self._armed = True

    def poll(self, now: int) -> bool:
        if self.occupancy < self.threshold:
            return False
        if self._armed:
            return self._emit(now)
        if self.last_pfc_at is None or now - self.last_pfc_at >= self.min_gap_ns:
            return self._emit(now)
        return False


# -- node --------------------------------------------------------------------

@dataclass
class MnConfig:
    mac: str = "02:00:00:00:00:02"
    pool_bytes: int = 1 << 30
    page_bytes: int = 2 * MB
    tlb_entries: int = 64
    page_table_buckets: int = 1024
    dram: DramConfig = field(default_factory=DramConfig)
    fifo_depth: int = 512
    pfc_threshold: int = 512
    pfc_hysteresis: int = 4
    pfc_min_gap_ns: int = 5_000
    pfc_pause_quanta: int = 0
    ingest_ns: int = 4  # FIFO drain, one frame per cycle
    parse_ns: int = 4
    resp_build_ns: int = 8
    resp_buffer: int = 512
    renak_ns: int = 5_000  # re-send SACK+NAK while a request gap stays open
    verify_translation: bool = False


class TxItem:
    """Queued egress work; the frame is built when the wire takes it."""

    __slots__ = ("nbytes", "kind", "ref", "meta")

    def __init__(self, nbytes: int, kind: str, ref=None, meta=None):
        self.nbytes = nbytes
        self.kind = kind
        self.ref = ref
        self.meta = meta


class _Retire:
    __slots__ = ("req_seq", "is_read", "data", "axi_id", "cn_tx", "mn_rx",
                 "dram_done", "ready", "resp_seq", "faulted")

    def __init__(self, req_seq, is_read, data, axi_id, cn_tx, mn_rx):
        self.req_seq = req_seq
        self.is_read = is_read
        self.data = data
        self.axi_id = axi_id
        self.cn_tx = cn_tx
        self.mn_rx = mn_rx
        self.dram_done = 0
        self.ready = False
        self.resp_seq = None
        self.faulted = False


_ACK_LEN = wire.wire_len(Ack)
_SACK_LEN = wire.wire_len(SackNak)
_RRESP_LEN = wire.wire_len(ReadResp)
_WRESP_LEN = wire.wire_len(WriteResp)


@dataclass
class MnStats:
    requests: int = 0
    reads: int = 0
    writes: int = 0
    acks: int = 0
    sack_naks: int = 0
    crc_errors: int = 0
    stale: int = 0
    duplicates: int = 0
    fast_retransmits: int = 0
    overruns: int = 0
    translation_faults: int = 0
    resp_evicted: int = 0
    renaks: int = 0


class MemoryNode:
    """Event-driven memory node; ``egress`` is the link back to the compute node."""

    name = "mn"

    def __init__(self, engine, config: MnConfig = MnConfig()):
        self.engine = engine
        self.config = config
        self.mac = wire.mac(config.mac)
        self.gmm = Gmm(config.pool_bytes, config.page_bytes, PageTable(config.page_table_buckets))
        self.translator = Translator(self.gmm, Tlb(config.tlb_entries), config.verify_translation)
        self.dram = Dram(config.dram)
        self.fifo = RxFifo(config.fifo_depth, config.pfc_threshold,
                           config.pfc_hysteresis, config.pfc_min_gap_ns)
        self.rob = ReorderBuffer()
        self.pending = PendingControl()
        self.pool: dict[int, bytes] = {}
        self.stats = MnStats()
        self.egress = None  # Link, wired by the scenario
        self.peer_mac = bytes(6)
        self._handles: deque = deque()  # scheduled service times of queued frames
        self._server_free = 0
        self._retire: deque = deque()
        self._by_req: dict[int, _Retire] = {}  # awaiting DRAM, by req seq
        self._responses: OrderedDict[int, _Retire] = OrderedDict()  # sent, by req seq
        self._next_resp = 0
        self._pfc_tick_at: Optional[int] = None
        self._renak_at: Optional[int] = None
        self._zero = bytes(LINE)

    # ingress ---------------------------------------------------------------

    def _drain_fifo(self, now: int) -> None:
        h = self._handles
        while h and h[0] <= now:
            h.popleft()
            self.fifo.pop()

    def on_packet(self, pkt) -> None:
        now = self.engine.now
        self._drain_fifo(now)
        try:
            emit = self.fifo.push(now)
        except FifoOverrun:
            self.stats.overruns += 1
            return
        if emit:
            self._send_pfc()
        t = now if now > self._server_free else self._server_free
        t = self.dram.release(t)
        self._server_free = t + self.config.ingest_ns
        self._handles.append(t)
        if t == now:
            self._drain_fifo(now)
            self._serve(pkt)
        else:
            self.engine.schedule(t, self._serve, pkt)

    def _send_pfc(self) -> None:
        now = self.engine.now
        raw = wire.encode(Pfc(self.mac, self.peer_mac, 0, self.config.pfc_pause_quanta))
        self.egress.send_pfc(raw)
        tick = now + self.config.pfc_min_gap_ns
        if self._pfc_tick_at is None or self._pfc_tick_at < now:
            self._pfc_tick_at = tick
            self.engine.schedule(tick, self._pfc_tick)

    def _pfc_tick(self, _=None) -> None:
        now = self.engine.now
        self._pfc_tick_at = None
        self._drain_fifo(now)
        if self.fifo.poll(now):
            self._send_pfc()
        elif self.fifo.occupancy >= self.fifo.threshold and self.fifo.last_pfc_at is not None:
            self._pfc_tick_at = self.fifo.last_pfc_at + self.fifo.min_gap_ns
            self.engine.schedule(self._pfc_tick_at, self._pfc_tick)

    def _serve(self, pkt) -> None:
        now = self.engine.now
        self._drain_fifo(now)
        try:
            frame = wire.decode(pkt.raw)
        except wire.CrcError:
            self.stats.crc_errors += 1
            if self.pending.pending_nak is None and not len(self.rob):
                # with a gap open, the SACK on the next held frame covers it
                self.pending.pending_nak = self.rob.expected
            return
        except wire.DecodeError:
            self.stats.crc_errors += 1
            return
        seq = frame.seq
        r = self.rob.on_frame(seq, True, (frame, pkt))
        kind = r.kind
        if kind is RxKind.DELIVER:
            self.pending.pending_nak = None
            for s, (f, p) in r.delivered:
                self._accept(s, f, p, now)
            self._queue(TxItem(_ACK_LEN, "ack"), now)
        elif kind is RxKind.GAP or kind is RxKind.HELD:
            p = self.pending
            if kind is RxKind.GAP:
                p.pending_nak = r.nak
            p.pending_sack = seq
            p.pending_ack = seq_add(self.rob.expected, -1)
            ctl = compose_control(p, self.mac, self.peer_mac)
            if ctl is None:
                # every held frame is SACKed so the sender's marks stay dense
                # and a later SACK range covers only frames really missing
                ctl = SackNak(self.mac, self.peer_mac, FLAG_SACK | FLAG_ACK, seq, 0, p.pending_ack)
            p.clear()
            self.stats.sack_naks += 1
            self._queue(TxItem(_SACK_LEN, "sacknak", ctl), now)
            if self._renak_at is None and self.config.renak_ns > 0:
                self._renak_at = now + self.config.renak_ns
                self.engine.schedule(self._renak_at, self._renak)
        elif kind is RxKind.STALE:
            self.stats.stale += 1
            done = self._responses.get(seq)
            if done is not None:
                self.stats.fast_retransmits += 1
                self._queue(TxItem(_RRESP_LEN if done.is_read else _WRESP_LEN, "resp", done), now)
            else:
                self._queue(TxItem(_ACK_LEN, "ack"), now)
        elif kind is RxKind.DUPLICATE:
            self.stats.duplicates += 1

    def _renak(self, _=None) -> None:
        """Lost NAKs and lost retransmissions would otherwise wait for the sender's RTO.

        The SACK names the lowest held seq, so the sender resends only the
        missing range below it.
        """
        self._renak_at = None
        rob = self.rob
        if not len(rob):
            return
        now = self.engine.now
        lowest = rob.held()[0]
        ctl = compose_control(PendingControl(rob.expected, lowest, seq_add(rob.expected, -1)),
                              self.mac, self.peer_mac)
        self.stats.renaks += 1
        self._queue(TxItem(_SACK_LEN, "sacknak", ctl), now)
        self._renak_at = now + self.config.renak_ns
        self.engine.schedule(self._renak_at, self._renak)

    def _accept(self, seq: int, frame, pkt, now: int) -> None:
        cfg = self.config
        st = self.stats
        st.requests += 1
        # the sender cannot have seq outstanding unless everything a full
        # window back has completed
        resp = self._responses
        while resp:
            old = next(iter(resp))
            if seq_diff(seq, old) >= cfg.resp_buffer:
                del resp[old]
            else:
                break
        is_read = type(frame) is ReadReq
        try:
            addr, walked = self.translator.translate(self.peer_mac, frame.address)
        except TranslationFault:
            st.translation_faults += 1
            return
        t = now + cfg.parse_ns
        if walked:
            t = self.dram.schedule(0, t)  # page-table walk is one DRAM access
        line = addr & ~(LINE - 1)
        if is_read:
            st.reads += 1
            data = self.pool.get(line, self._zero)
            ent = _Retire(seq, True, data, frame.arid, pkt.sent_at, pkt.arrived)
        else:
            st.writes += 1
            self.pool[line] = frame.data
            ent = _Retire(seq, False, None, frame.awid, pkt.sent_at, pkt.arrived)
        done = self.dram.schedule(line, t)
        ent.dram_done = done
        self._retire.append(ent)
        self._by_req[seq] = ent
        self.engine.schedule(done + cfg.resp_build_ns, self._on_dram_done, ent)

    def _on_dram_done(self, ent: _Retire) -> None:
        ent.ready = True
        now = self.engine.now
        q = self._retire
        resp = self._responses
        cap = self.config.resp_buffer
        while q and q[0].ready:
            e = q.popleft()
            del self._by_req[e.req_seq]
            e.resp_seq = self._next_resp
            self._next_resp = seq_add(self._next_resp, 1)
            resp[e.req_seq] = e
            if len(resp) > cap:
                resp.popitem(last=False)
                self.stats.resp_evicted += 1
            self._queue(TxItem(_RRESP_LEN if e.is_read else _WRESP_LEN, "resp", e), now)

    # egress ----------------------------------------------------------------

    def _queue(self, item: TxItem, ready_at: int) -> None:
        self.egress.send(item, ready_at)

    def build(self, item: TxItem, now: int):
        kind = item.kind
        cum = (self.rob.expected - 1) & 0xFFFF
        if kind == "resp":
            e = item.ref
            if e.is_read:
                raw = pack_read_resp(self.mac, self.peer_mac, e.resp_seq, e.req_seq, cum, e.axi_id, e.data)
            else:
                raw = pack_write_resp(self.mac, self.peer_mac, e.resp_seq, e.req_seq, cum, e.axi_id)
            return raw, (e.cn_tx, e.mn_rx, e.dram_done, now), e.resp_seq
        if kind == "ack":
            self.stats.acks += 1
            return pack_ack(self.mac, self.peer_mac, cum), None, None
        return wire.encode(item.ref, check=False), None, None

    # inspection ------------------------------------------------------------

    def snapshot(self) -> list[tuple[int, bytes]]:
        return sorted(self.pool.items())


def dump_pool(snapshot, out) -> None:
    """Binary snapshot: 8-byte big-endian address then the 64-byte line, sorted."""
    for addr, data in sorted(snapshot):
        out.write(addr.to_bytes(8, "big"))
        out.write(data)


def load_pool(raw: bytes) -> dict[int, bytes]:
    rec = 8 + LINE
    if len(raw) % rec:
        raise ValueError("pool snapshot length is not a whole number of records")
    return {int.from_bytes(raw[i:i + 8], "big"): raw[i + 8:i + rec] for i in range(0, len(raw), rec)}
