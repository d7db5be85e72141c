import random

import pytest
from hypothesis import given, strategies as st

from cxloe.cache import (AlreadyPresent, Cache, CacheConfig, LineState, MisalignedAddress, NeedFetch,
                         NeedWritebackThenFetch, Op, ReadHit, WriteAllocNoRemote, WriteHit,
                         WriteReplace, format_trace, parse_trace, replay)

SET_STRIDE = 128 * 64


def d(x: int) -> bytes:
    return bytes([x & 0xFF]) * 64


def test_geometry():
    c = CacheConfig()
    assert c.sets == 128
    assert c.sets * c.ways * c.line_bytes == 32 * 1024
    with pytest.raises(ValueError):
        CacheConfig(capacity_bytes=3000)


def test_write_miss_allocates_without_remote_then_hits():
    c = Cache()
    assert c.access(Op.WRITE, 0x0, d(1)) == WriteAllocNoRemote()
    assert c.access(Op.READ, 0x0) == ReadHit(d(1))
    assert c.state(0x0) is LineState.M


def test_read_miss_fill_then_hit_in_e():
    c = Cache()
    assert c.access(Op.READ, 0x40) == NeedFetch()
    assert c.fill(0x40, d(2)) is None
    assert c.access(Op.READ, 0x40) == ReadHit(d(2))
    assert c.state(0x40) is LineState.E


def test_write_to_e_upgrades_to_m_silently():
    c = Cache()
    c.access(Op.READ, 0x80)
    c.fill(0x80, d(1))
    assert c.access(Op.WRITE, 0x80, d(9)) == WriteHit()
    assert c.state(0x80) is LineState.M


def test_fifth_write_to_one_set_replaces_first():
    c = Cache()
    for i in range(4):
        assert c.access(Op.WRITE, i * SET_STRIDE, d(i)) == WriteAllocNoRemote()
    assert c.access(Op.WRITE, 4 * SET_STRIDE, d(4)) == WriteReplace(0, d(0))


def test_fill_into_full_clean_set_evicts_silently():
    c = Cache()
    for i in range(4):
        c.access(Op.READ, i * SET_STRIDE)
        c.fill(i * SET_STRIDE, d(i))
    c.access(Op.READ, 4 * SET_STRIDE)  # clean victim dropped here
    assert c.fill(4 * SET_STRIDE, d(4)) is None
    assert c.stats().writebacks == 0


def test_fill_evicting_dirty_lru_returns_data():
    c = Cache()
    c.access(Op.WRITE, 0, d(7))
    for i in range(1, 4):
        c.access(Op.READ, i * SET_STRIDE)
        c.fill(i * SET_STRIDE, d(i))
    assert c.fill(4 * SET_STRIDE, d(4)) == (0, d(7))


def test_read_miss_with_dirty_victim_needs_writeback():
    c = Cache()
    for i in range(4):
        c.access(Op.WRITE, i * SET_STRIDE, d(i))
    out = c.access(Op.READ, 4 * SET_STRIDE)
    assert out == NeedWritebackThenFetch(0, d(0))


def test_errors():
    c = Cache()
    with pytest.raises(MisalignedAddress):
        c.access(Op.READ, 3)
    c.access(Op.WRITE, 0, d(0))
    with pytest.raises(AlreadyPresent):
        c.fill(0, d(1))


def test_stats_one_hit_one_miss():
    c = Cache()
    c.access(Op.READ, 0)
    c.fill(0, d(0))
    c.access(Op.READ, 0)
    s = c.stats()
    assert (s.hits, s.misses) == (1, 1)


def test_trace_format_round_trip():
    ops = [(Op.WRITE, 0x40, d(3)), (Op.READ, 0x40, None)]
    assert parse_trace(format_trace(ops).splitlines()) == ops
    with pytest.raises(ValueError):
        parse_trace(["W 40 00"])


# -- reference models ------------------------------------------------------------

class RecencyOracle:
    """Brute force: per set, a list of line addresses ordered by last access."""

    def __init__(self, ways=4, sets=128):
        self.ways, self.sets = ways, sets
        self.order = {}

    def touch(self, addr: int):
        s = self.order.setdefault((addr // 64) % self.sets, [])
        victim = None
        if addr in s:
            s.remove(addr)
        elif len(s) == self.ways:
            victim = s.pop(0)
        s.append(addr)
        return victim


def random_trace(rng, n, lines):
    ops = []
    for _ in range(n):
        addr = rng.randrange(lines) * 64
        if rng.random() < 0.5:
            ops.append((Op.READ, addr, None))
        else:
            ops.append((Op.WRITE, addr, rng.randbytes(64)))
    return ops


def check_against_models(ops):
    """Flat-map data oracle, recency oracle, dirty-iff-divergent and stat counts."""
    cache = Cache()
    backing = {}
    flat = {}
    lru = RecencyOracle()
    hits = misses = 0
    zero = bytes(64)
    for op, addr, data in ops:
        present = cache.contains(addr)
        hits += present
        misses += not present
        victim = lru.touch(addr)
        out = cache.access(op, addr, data)
        if isinstance(out, (NeedWritebackThenFetch, WriteReplace)):
            assert out.evicted_addr == victim
            if out.evicted_data is not None:
                backing[out.evicted_addr] = out.evicted_data
        if op is Op.READ:
            if isinstance(out, ReadHit):
                got = out.data
            else:
                if isinstance(out, NeedFetch) and victim is not None:
                    assert not cache.contains(victim)
                got = backing.get(addr, zero)
                cache.fill(addr, got)
            assert got == flat.get(addr, zero)
        else:
            flat[addr] = data
        # M exactly when the line differs from remote memory; absent lines are current remotely
        state = cache.state(addr)
        diverged = flat.get(addr, zero) != backing.get(addr, zero)
        if state is LineState.I:
            assert not diverged
        else:
            assert (state is LineState.M) == diverged
        if victim is not None and victim != addr:
            assert flat.get(victim, zero) == backing.get(victim, zero)
    for addr, data in cache.flush():
        backing[addr] = data
    for addr, data in flat.items():
        assert backing.get(addr, zero) == data
    s = cache.stats()
    assert (s.hits, s.misses) == (hits, misses)


@given(st.integers(0, 2**32), st.integers(8, 2048))
def test_cache_matches_reference_models(seed, lines):
    check_against_models(random_trace(random.Random(seed), 400, lines))


def test_cache_matches_reference_models_long_trace():
    check_against_models(random_trace(random.Random(11), 100_000, 4096))


def test_replay_helper_matches_flat_map():
    rng = random.Random(5)
    ops = random_trace(rng, 5000, 2048)
    seen = replay(Cache(), ops, {})
    flat = {}
    expect = []
    for op, addr, data in ops:
        if op is Op.WRITE:
            flat[addr] = data
        else:
            expect.append(flat.get(addr, bytes(64)))
    assert seen == expect


def test_all_hit_trace_has_no_misses():
    c = Cache()
    for i in range(64):
        c.access(Op.WRITE, i * 64, d(i))
    before = c.stats().misses
    for _ in range(10):
        for i in range(64):
            c.access(Op.READ, i * 64)
    assert c.stats().misses == before
