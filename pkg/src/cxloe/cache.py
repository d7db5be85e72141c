"""Compute-node line cache: set-associative, LRU, M/E/I line states.

Only three states exist because compute nodes never share a memory region.
A write miss that finds a free way is absorbed locally; remote memory is not
told about it until the line is evicted.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Optional


class MisalignedAddress(ValueError):
    pass


class AlreadyPresent(ValueError):
    pass


class LineState(Enum):
    M = "M"
    E = "E"
    I = "I"  # noqa: E741


class Op(Enum):
    READ = "R"
    WRITE = "W"


@dataclass(frozen=True)
class CacheConfig:
    capacity_bytes: int = 32 * 1024
    ways: int = 4
    line_bytes: int = 64

    def __post_init__(self):
        for name in ("capacity_bytes", "ways", "line_bytes"):
            v = getattr(self, name)
            if v <= 0 or v & (v - 1):
                raise ValueError(f"{name}={v} must be a power of two")
        if self.capacity_bytes % (self.ways * self.line_bytes):
            raise ValueError("capacity must be ways * sets * line_bytes")

    @property
    def sets(self) -> int:
        return self.capacity_bytes // (self.ways * self.line_bytes)


@dataclass
class CacheLine:
    tag: int
    state: LineState
    data: bytes


# -- outcomes ----------------------------------------------------------------

@dataclass(frozen=True)
class ReadHit:
    data: bytes


@dataclass(frozen=True)
class WriteHit:
    pass


@dataclass(frozen=True)
class WriteAllocNoRemote:
    pass


@dataclass(frozen=True)
class NeedFetch:
    pass


@dataclass(frozen=True)
class NeedWritebackThenFetch:
    evicted_addr: int
    evicted_data: bytes


@dataclass(frozen=True)
class WriteReplace:
    """Write miss in a full set. ``evicted_data`` is None for a clean victim."""
    evicted_addr: int
    evicted_data: Optional[bytes]


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    writebacks: int = 0
    alloc_no_remote: int = 0


class Cache:
    def __init__(self, config: CacheConfig = CacheConfig()):
        self.config = config
        self._line = config.line_bytes
        self._nsets = config.sets
        # per set: tag -> line, ordered least- to most-recently used
        self._sets = [OrderedDict() for _ in range(self._nsets)]
        self._stats = CacheStats()

    def _locate(self, addr: int) -> tuple[OrderedDict, int]:
        if addr % self._line:
            raise MisalignedAddress(f"0x{addr:x} is not {self._line}-byte aligned")
        index = addr // self._line
        return self._sets[index % self._nsets], index // self._nsets

    def _addr(self, set_index: int, tag: int) -> int:
        return (tag * self._nsets + set_index) * self._line

    def set_index(self, addr: int) -> int:
        return (addr // self._line) % self._nsets

    def _evict_lru(self, s: OrderedDict, set_index: int) -> tuple[int, Optional[bytes]]:
        tag, victim = s.popitem(last=False)
        if victim.state is LineState.M:
            self._stats.writebacks += 1
            return self._addr(set_index, tag), victim.data
        return self._addr(set_index, tag), None

    def access(self, op: Op, addr: int, data: Optional[bytes] = None):
        s, tag = self._locate(addr)
        line = s.get(tag)
        st = self._stats
        if op is Op.READ:
            if line is not None:
                st.hits += 1
                s.move_to_end(tag)
                return ReadHit(line.data)
            st.misses += 1
            if len(s) < self.config.ways:
                return NeedFetch()
            victim_addr, victim_data = self._evict_lru(s, self.set_index(addr))
            if victim_data is None:
                return NeedFetch()
            return NeedWritebackThenFetch(victim_addr, victim_data)

        if data is None or len(data) != self._line:
            raise ValueError("write needs exactly one line of data")
        if line is not None:
            st.hits += 1
            line.data = bytes(data)
            line.state = LineState.M
            s.move_to_end(tag)
            return WriteHit()
        st.misses += 1
        if len(s) < self.config.ways:
            s[tag] = CacheLine(tag, LineState.M, bytes(data))
            st.alloc_no_remote += 1
            return WriteAllocNoRemote()
        victim_addr, victim_data = self._evict_lru(s, self.set_index(addr))
        s[tag] = CacheLine(tag, LineState.M, bytes(data))
        return WriteReplace(victim_addr, victim_data)

    def fill(self, addr: int, data: bytes) -> Optional[tuple[int, Optional[bytes]]]:
        """Install fetched data in E. Returns the evicted ``(addr, data-or-None)`` if any."""
        s, tag = self._locate(addr)
        if tag in s:
            raise AlreadyPresent(f"0x{addr:x}")
        evicted = None
        if len(s) >= self.config.ways:
            evicted = self._evict_lru(s, self.set_index(addr))
        s[tag] = CacheLine(tag, LineState.E, bytes(data))
        return evicted

    def contains(self, addr: int) -> bool:
        s, tag = self._locate(addr)
        return tag in s

    def state(self, addr: int) -> LineState:
        s, tag = self._locate(addr)
        line = s.get(tag)
        return LineState.I if line is None else line.state

    def lines(self, set_index: int) -> list[tuple[int, int, CacheLine]]:
        """``(lru_rank, addr, line)`` for the valid lines of one set; rank 0 is LRU."""
        return [(rank, self._addr(set_index, tag), line)
                for rank, (tag, line) in enumerate(self._sets[set_index].items())]

    def dirty_lines(self) -> Iterator[tuple[int, bytes]]:
        for i, s in enumerate(self._sets):
            for tag, line in s.items():
                if line.state is LineState.M:
                    yield self._addr(i, tag), line.data

    def flush(self) -> list[tuple[int, bytes]]:
        """Clean every M line; returns the writebacks in address order."""
        out = sorted(self.dirty_lines())
        for addr, _ in out:
            s, tag = self._locate(addr)
            s[tag].state = LineState.E
        self._stats.writebacks += len(out)
        return out

    def stats(self) -> CacheStats:
        return CacheStats(**vars(self._stats))


# -- trace replay ------------------------------------------------------------

def parse_trace(lines: Iterable[str]) -> list[tuple[Op, int, Optional[bytes]]]:
    """Parse ``R <hex-addr>`` / ``W <hex-addr> <hex-64B>`` lines."""
    ops = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "R" and len(parts) == 2:
                ops.append((Op.READ, int(parts[1], 16), None))
            elif parts[0] == "W" and len(parts) == 3:
                data = bytes.fromhex(parts[2])
                if len(data) != 64:
                    raise ValueError("write data must be 64 bytes")
                ops.append((Op.WRITE, int(parts[1], 16), data))
            else:
                raise ValueError(f"unrecognised record {line.strip()!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return ops


def format_trace(ops: Iterable[tuple[Op, int, Optional[bytes]]]) -> str:
    out = []
    for op, addr, data in ops:
        if op is Op.READ:
            out.append(f"R {addr:x}")
        else:
            out.append(f"W {addr:x} {data.hex()}")
    return "\n".join(out) + "\n"


def replay(cache: Cache, ops, backing: dict) -> list[bytes]:
    """Run ``ops`` against ``cache`` with ``backing`` as remote memory.

    Misses are served from ``backing`` immediately and writebacks update it.
    Returns the data observed by every read, in order.
    """
    zero = bytes(cache.config.line_bytes)
    seen = []
    for op, addr, data in ops:
        out = cache.access(op, addr, data)
        if isinstance(out, (NeedWritebackThenFetch, WriteReplace)) and out.evicted_data is not None:
            backing[out.evicted_addr] = out.evicted_data
        if isinstance(out, ReadHit):
            seen.append(out.data)
        elif isinstance(out, (NeedFetch, NeedWritebackThenFetch)):
            fetched = backing.get(addr, zero)
            evicted = cache.fill(addr, fetched)
            if evicted is not None and evicted[1] is not None:
                backing[evicted[0]] = evicted[1]
            seen.append(fetched)
    return seen
