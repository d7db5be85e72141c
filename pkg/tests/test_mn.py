import io
import random

import pytest
from hypothesis import given, strategies as st

from cxloe import wire
from cxloe.fabric import Packet
from cxloe.mn import (MB, Dram, DramConfig, FifoOverrun, Gmm, MemoryNode, MnConfig, OutOfPoolMemory,
                      PageTable, RxFifo, Tlb, TranslationFault, TranslationMismatch, Translator,
                      dump_pool, load_pool)
from cxloe.sim import Engine

A = wire.mac("02:00:00:00:00:01")
B = wire.mac("02:00:00:00:00:03")
MN_MAC = wire.mac("02:00:00:00:00:02")


# -- GMM -------------------------------------------------------------------------

def test_alloc_maps_pages():
    g = Gmm(64 * MB)
    r = g.alloc(A, 4 * MB)
    assert (r.cmem_base, len(r.mpmem_pages)) == (0, 2)


def test_allocations_are_exclusive():
    g = Gmm(64 * MB)
    a = g.alloc(A, 6 * MB)
    b = g.alloc(B, 6 * MB)
    assert not set(a.mpmem_pages) & set(b.mpmem_pages)


def test_pool_exhaustion():
    g = Gmm(8 * MB)
    g.alloc(A, 8 * MB)
    with pytest.raises(OutOfPoolMemory):
        g.alloc(B, 1)


def test_expand_appends_and_keeps_mappings():
    g = Gmm(64 * MB)
    g.alloc(A, 2 * MB)
    g.alloc(B, 4 * MB)
    tr = Translator(g, Tlb())
    before_a = tr.translate(A, 0x1234)[0]
    before_b = [tr.translate(B, x)[0] for x in range(0, 4 * MB, MB // 2)]
    r = g.expand(A, 2 * MB)
    assert len(g.records[A]) == 2 and r.cmem_base == 2 * MB
    assert tr.translate(A, 0x1234)[0] == before_a
    assert [tr.translate(B, x)[0] for x in range(0, 4 * MB, MB // 2)] == before_b
    with pytest.raises(KeyError):
        g.expand(wire.mac("02:00:00:00:00:09"), MB)


# -- translation --------------------------------------------------------------------

def test_second_access_hits_tlb():
    g = Gmm(64 * MB)
    g.alloc(A, 2 * MB)
    tr = Translator(g, Tlb())
    assert tr.translate(A, 0x40)[1] is True
    assert tr.translate(A, 0x80)[1] is False


def test_round_robin_over_capacity_always_misses():
    g = Gmm(256 * MB)
    g.alloc(A, 65 * 2 * MB)
    tr = Translator(g, Tlb(64))
    walked = [tr.translate(A, (i % 65) * 2 * MB)[1] for i in range(65 * 4)]
    assert all(walked)


def test_unmapped_address_faults():
    tr = Translator(Gmm(64 * MB), Tlb())
    with pytest.raises(TranslationFault):
        tr.translate(A, 0)


def test_verify_mode_catches_stale_tlb():
    g = Gmm(64 * MB)
    g.alloc(A, 2 * MB)
    tr = Translator(g, Tlb(), verify=True)
    tr.translate(A, 0)
    tr.tlb.insert((A, 0), 31)  # corrupt the cached entry
    with pytest.raises(TranslationMismatch):
        tr.translate(A, 0)


def test_page_table_chaining_is_exact():
    pt = PageTable(buckets=1)  # every key collides
    for i in range(50):
        pt.insert(A, i, 100 + i)
        pt.insert(B, i, 200 + i)
    assert pt.longest_chain() == 100
    assert pt.lookup(A, 7) == 107 and pt.lookup(B, 7) == 207
    assert pt.lookup(A, 99) is None
    with pytest.raises(ValueError):
        pt.insert(A, 3, 1)


def multi_cn_workload(seed: int, ops: int, tlb_entries: int = 64):
    """Random allocations, expansions and lookups for several compute nodes."""
    rng = random.Random(seed)
    g = Gmm(2048 * MB)
    tr = Translator(g, Tlb(tlb_entries), verify=True)
    cns = [wire.mac(f"02:00:00:00:01:{i:02x}") for i in range(4)]
    for cn in cns:
        g.alloc(cn, rng.randrange(1, 40) * MB)
    lookups = 0
    for _ in range(ops):
        cn = rng.choice(cns)
        if rng.random() < 0.001:
            g.expand(cn, 2 * MB)
            continue
        addr = rng.randrange(g.allocated_bytes(cn))
        pool_addr, _ = tr.translate(cn, addr)
        page, off = divmod(addr, g.page_bytes)
        assert pool_addr == g.table.lookup(cn, page) * g.page_bytes + off
        assert g.owner[pool_addr // g.page_bytes] == cn
        lookups += 1
    return g, tr, lookups


def test_multi_cn_dual_path_and_exclusivity():
    g, tr, lookups = multi_cn_workload(3, 20_000)
    assert lookups > 19_000
    keys = [(c, p) for c, p, _ in g.table.entries()]
    pages = [m for _, _, m in g.table.entries()]
    assert len(set(keys)) == len(keys)
    assert len(set(pages)) == len(pages)
    assert tr.tlb.hits > 0 and tr.walks > 0


@given(st.lists(st.integers(0, 40), max_size=300), st.integers(1, 8))
def test_tlb_presence_never_changes_result(pages, tlb_entries):
    g = Gmm(128 * MB)
    g.alloc(A, 41 * 2 * MB)
    fast = Translator(g, Tlb(tlb_entries))
    for p in pages:
        addr = p * 2 * MB + 64
        assert fast.translate(A, addr)[0] == g.table.lookup(A, p) * 2 * MB + 64
        assert len(fast.tlb) <= tlb_entries


# -- DRAM ----------------------------------------------------------------------------

def test_idle_bank():
    assert Dram().schedule(0, 100) == 148


def test_consecutive_lines_interleave():
    d = Dram()
    assert d.schedule(0, 0) == 48
    assert d.schedule(64, 0) == 48
    assert d.bank_of(0) != d.bank_of(64)


def test_same_bank_queues():
    d = Dram()
    d.schedule(0, 0)
    assert d.schedule(16 * 64, 0) == 96


def test_rcb_split():
    d = Dram()
    row, col, bank = d.rcb((5 * 128 * 16 + 3 * 16 + 7) * 64)
    assert (row, col, bank) == (5, 3, 7)


def test_stall_window_defers_service():
    d = Dram(DramConfig(stall_period_ns=1000, stall_duration_ns=200))
    assert d.schedule(0, 850) == 1048
    assert d.release(799) == 799
    with pytest.raises(ValueError):
        DramConfig(stall_period_ns=100, stall_duration_ns=100)


@given(st.lists(st.tuples(st.integers(0, 500), st.integers(0, 63)), max_size=200))
def test_bank_completions_fifo_and_spaced(reqs):
    d = Dram(DramConfig(stall_period_ns=700, stall_duration_ns=100))
    now = 0
    last = {}
    for gap, line in reqs:
        now += gap
        b = d.bank_of(line * 64)
        done = d.schedule(line * 64, now)
        if b in last:
            assert done - last[b] >= 48
        last[b] = done


# -- RX FIFO and PFC ----------------------------------------------------------------

def test_pfc_on_upward_crossing():
    f = RxFifo(threshold=50)
    emitted = [f.push(0) for _ in range(50)]
    assert emitted.count(True) == 1 and emitted[-1]


def test_pfc_repeats_per_min_gap_while_above():
    f = RxFifo(threshold=50, min_gap_ns=5000)
    for _ in range(60):
        f.push(0)
    repeats = sum(f.poll(t) for t in range(0, 12_001, 100))
    assert repeats == 2


def test_hysteresis_rearms():
    f = RxFifo(threshold=10, hysteresis=4)
    for _ in range(10):
        f.push(0)
    for _ in range(3):
        f.pop()
    assert not f.push(1)  # still disarmed: fell only to 7
    for _ in range(2):
        f.pop()
    for _ in range(3):  # back up to 9
        assert not f.push(2)
    assert f.push(3)


def test_overrun():
    f = RxFifo(depth=2)
    f.push(0)
    f.push(0)
    with pytest.raises(FifoOverrun):
        f.push(0)
    assert f.overruns == 1


def test_threshold_above_peak_never_pfcs():
    f = RxFifo(threshold=105)
    rng = random.Random(1)
    for t in range(10_000):
        if f.occupancy < 104 and rng.random() < 0.5:
            f.push(t)
        elif f.occupancy:
            f.pop()
        f.poll(t)
    assert f.pfc_sent == 0


# -- pool snapshot --------------------------------------------------------------------

def test_pool_dump_round_trip():
    snap = [(128, b"\x02" * 64), (0, b"\x01" * 64)]
    buf = io.BytesIO()
    dump_pool(snap, buf)
    assert buf.getvalue()[:8] == bytes(8)
    assert load_pool(buf.getvalue()) == dict(snap)
    with pytest.raises(ValueError):
        load_pool(b"\x00" * 10)


# -- node behaviour ---------------------------------------------------------------------

class Capture:
    """Stands in for the egress link: builds frames immediately and records them."""

    def __init__(self, eng, node):
        self.eng, self.node = eng, node
        self.sent = []
        self.pfc = []

    def send(self, item, ready_at):
        self.eng.schedule(max(ready_at, self.eng.now), self._go, item)

    def _go(self, item):
        raw, _, _ = self.node.build(item, self.eng.now)
        self.sent.append((self.eng.now, wire.decode(raw)))

    def send_pfc(self, raw, meta=None):
        self.pfc.append(self.eng.now)
        return self.eng.now


def node(**kw):
    eng = Engine()
    mn = MemoryNode(eng, MnConfig(**kw))
    mn.peer_mac = A
    mn.gmm.alloc(A, 2 * MB)
    cap = Capture(eng, mn)
    mn.egress = cap
    return eng, mn, cap


def deliver(eng, mn, frame, at, corrupt=False):
    raw = wire.encode(frame)
    if corrupt:
        raw = wire.flip_bit(raw, 200)
    eng.schedule(at, mn.on_packet, Packet(raw, at, at))


def wr(seq, addr=0, fill=1):
    return wire.WriteReq(A, MN_MAC, seq, 0, addr, bytes([fill]) * 64)


def test_in_order_write_acks_then_responds_after_dram():
    eng, mn, cap = node()
    deliver(eng, mn, wr(0), 100)
    eng.run()
    kinds = [(t, type(f).__name__) for t, f in cap.sent]
    assert kinds[0] == (100, "Ack")
    t_resp = [t for t, k in kinds if k == "WriteResp"][0]
    assert t_resp > 100 + 48  # walk plus access
    assert mn.pool[mn.translator.translate(A, 0)[0]] == b"\x01" * 64


def test_gap_sends_sack_nak_and_stale_replays_response():
    eng, mn, cap = node()
    deliver(eng, mn, wr(0, 0), 10)
    deliver(eng, mn, wr(2, 128), 20)  # seq 1 missing
    eng.run_until(1000)  # the re-NAK timer keeps firing while the hole is open
    ctl = [f for _, f in cap.sent if isinstance(f, wire.SackNak)]
    assert (ctl[0].sack, ctl[0].nak, ctl[0].ack) == (2, 1, 0)
    deliver(eng, mn, wr(1, 64), eng.now + 10)
    eng.run()
    served = sum(mn.dram.served)
    n_resp = sum(isinstance(f, wire.WriteResp) for _, f in cap.sent)
    assert n_resp == 3
    deliver(eng, mn, wr(0, 0, fill=9), eng.now + 10)  # retransmitted old request
    eng.run()
    assert sum(mn.dram.served) == served  # no second DRAM access
    assert mn.stats.fast_retransmits == 1
    assert mn.pool[mn.translator.translate(A, 0)[0]] == b"\x01" * 64
    assert sum(isinstance(f, wire.WriteResp) for _, f in cap.sent) == 4


def test_crc_error_becomes_nak_on_next_arrival():
    eng, mn, cap = node()
    deliver(eng, mn, wr(0), 10, corrupt=True)
    deliver(eng, mn, wr(1), 20)
    eng.run_until(1000)
    ctl = [f for _, f in cap.sent if isinstance(f, wire.SackNak)]
    assert (ctl[0].sack, ctl[0].nak) == (1, 0)


def test_unmapped_request_is_dropped_and_counted():
    eng, mn, cap = node()
    deliver(eng, mn, wr(0, addr=64 * MB), 10)
    eng.run()
    assert mn.stats.translation_faults == 1
    assert not any(isinstance(f, wire.WriteResp) for _, f in cap.sent)
