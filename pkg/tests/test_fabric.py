import pytest
from hypothesis import given, settings, strategies as st

from cxloe import wire
from cxloe.fabric import GBPS, FaultConfig, Link, LinkConfig, parse_loss_trace
from cxloe.sim import Engine

CN = wire.mac("02:00:00:00:00:01")
MN = wire.mac("02:00:00:00:00:02")


class Item:
    def __init__(self, seq, nbytes=93):
        self.seq = seq
        self.nbytes = nbytes


def build(item, now):
    raw = wire.encode(wire.WriteReq(CN, MN, item.seq, 0, 0, bytes(64)))
    return raw, item.seq, item.seq


def make(config=LinkConfig(), faults=FaultConfig(), seed=1, gate=None):
    eng = Engine(seed)
    got = []
    link = Link(eng, config, got.append, build, faults, "t", gate)
    return eng, link, got


def test_delivery_delay_arithmetic():
    cfg = LinkConfig(propagation_ns=500, processing_ns=350, batch_ns=0)
    eng, link, got = make(cfg)
    link.send(Item(0), 0)
    eng.run()
    # 744 bits at 100 Gbps is 7.44 ns; whole-ns events round the wire end up
    assert got[0].arrived == 8 + 350 + 500
    assert cfg.serialization_ps(93) == 7440


def test_back_to_back_frames_keep_sub_ns_serialization():
    cfg = LinkConfig(propagation_ns=0, processing_ns=0)
    eng, link, got = make(cfg)
    for s in range(100):
        link.send(Item(s), 0)
    eng.run()
    assert got[-1].arrived == 744  # 100 * 7.44 ns exactly


def test_batching_does_not_change_arrival_times():
    def arrivals(batch):
        eng, link, got = make(LinkConfig(batch_ns=batch))
        for s in range(300):
            link.send(Item(s, 93 if s % 3 else 31), s * 3)
        eng.run()
        return [(p.meta, p.arrived, p.sent_at) for p in got]

    assert arrivals(0) == arrivals(64)


def test_drop_all():
    eng, link, got = make(faults=FaultConfig(drop_probability=1.0))
    for s in range(10):
        link.send(Item(s), 0)
    eng.run()
    assert got == [] and link.stats.dropped == 10


def test_trace_corrupts_only_named_seq():
    faults = FaultConfig(trace=parse_loss_trace(["CORRUPT 5", "# comment", ""]))
    eng, link, got = make(faults=faults)
    for s in range(10):
        link.send(Item(s), 0)
    eng.run()
    bad = []
    for p in got:
        try:
            wire.decode(p.raw)
        except wire.CrcError:
            bad.append(p.meta)
    assert bad == [5]


def test_trace_overrides_probability():
    faults = FaultConfig(drop_probability=1.0, trace=(("CORRUPT", 3),))
    eng, link, got = make(faults=faults)
    for s in range(5):
        link.send(Item(s), 0)
    eng.run()
    assert [p.meta for p in got] == [3]


def test_loss_trace_parse_errors():
    with pytest.raises(ValueError):
        parse_loss_trace(["LOSE 3"])
    assert parse_loss_trace(["DROP 0x10"]) == (("DROP", 16),)


def test_pfc_is_exempt_and_fast():
    cfg = LinkConfig(propagation_ns=500, processing_ns=350)
    eng, link, got = make(cfg, FaultConfig(drop_probability=1.0))
    raw = wire.encode(wire.Pfc(MN, CN, 0, 10))
    t1 = link.send_pfc(raw, "p1")
    t2 = link.send_pfc(raw, "p2")
    eng.run()
    assert [p.meta for p in got] == ["p1", "p2"]
    assert t1 == t2 == 2 + 500  # 22 bytes serialize in 1.76 ns, no processing delay


def test_pfc_faults_opt_in():
    eng, link, got = make(faults=FaultConfig(drop_probability=1.0, pfc_faults=True))
    assert link.send_pfc(wire.encode(wire.Pfc(MN, CN)), None) == -1


def test_pause_holds_queue():
    eng, link, got = make(LinkConfig(propagation_ns=0, processing_ns=0))
    link.pause(1000)
    link.send(Item(0), 0)
    eng.run()
    assert got[0].sent_at == 1000


def test_gate_defers_head():
    calls = []

    def gate(nbytes, now):
        calls.append(now)
        return None if now >= 50 else 50

    eng, link, got = make(gate=gate)
    link.send(Item(0), 0)
    eng.run()
    assert got[0].sent_at == 50


def test_fault_config_validation():
    with pytest.raises(ValueError):
        FaultConfig(drop_probability=1.5)
    with pytest.raises(ValueError):
        LinkConfig(rate_bps=0)


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 2000), st.sampled_from([25, 31, 93, 95])), min_size=1, max_size=300),
       st.floats(0, 0.5), st.integers(0, 2**16))
def test_fifo_order_and_rate_bound(sends, p_drop, seed):
    cfg = LinkConfig()
    eng, link, got = make(cfg, FaultConfig(drop_probability=p_drop), seed)
    t = 0
    for i, (gap, n) in enumerate(sends):
        t += gap
        link.send(Item(i, n), t)
    eng.run()
    seqs = [p.meta for p in got]
    assert seqs == sorted(seqs)
    assert link.stats.frames == len(sends)
    # any window of transmissions never beats the line rate (one frame of slack for rounding)
    starts = [p.sent_at for p in got]
    sizes = {i: n for i, (_, n) in enumerate(sends)}
    for a in range(len(got)):
        for b in range(a + 1, min(len(got), a + 40)):
            bits = sum(sizes[got[k].meta] for k in range(a, b)) * 8
            span = starts[b] - starts[a]
            assert bits <= span * cfg.rate_bps // GBPS + 96 * 8
