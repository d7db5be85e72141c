"""Point-to-point Ethernet link: serialization, processing, propagation, faults.

Each direction is a :class:`Link` owning a FIFO transmit queue. Serialization
is tracked in picoseconds so back-to-back frames achieve the exact line rate
even though events fire on integer nanoseconds.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .wire import CRC_LEN, HEADER_LEN, flip_bit

GBPS = 1_000_000_000
PS_PER_NS = 1000


@dataclass(frozen=True)
class LinkConfig:
    rate_bps: int = 100 * GBPS
    propagation_ns: int = 20
    processing_ns: int = 480  # Ethernet IP, both sides of one direction combined
    batch_ns: int = 64  # look-ahead for committing back-to-back frames in one event

    def __post_init__(self):
        if self.rate_bps <= 0:
            raise ValueError("link rate must be positive")
        if self.propagation_ns < 0 or self.processing_ns < 0 or self.batch_ns < 0:
            raise ValueError("delays must be non-negative")

    def serialization_ps(self, nbytes: int) -> int:
        return nbytes * 8 * 10**12 // self.rate_bps


@dataclass(frozen=True)
class FaultConfig:
    drop_probability: float = 0.0
    corrupt_probability: float = 0.0
    trace: tuple = ()  # ((action, seq), ...) consumed once each
    pfc_faults: bool = False

    def __post_init__(self):
        for name in ("drop_probability", "corrupt_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        for action, _ in self.trace:
            if action not in ("DROP", "CORRUPT"):
                raise ValueError(f"unknown fault action {action!r}")

    @property
    def active(self) -> bool:
        return bool(self.drop_probability or self.corrupt_probability or self.trace)


def parse_loss_trace(lines: Iterable[str]) -> tuple:
    """``DROP <seq>`` / ``CORRUPT <seq>`` lines; ``#`` starts a comment."""
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in ("DROP", "CORRUPT"):
            raise ValueError(f"line {lineno}: expected DROP|CORRUPT <seq>, got {line!r}")
        out.append((parts[0], int(parts[1], 0)))
    return tuple(out)


class Packet:
    """Frame bytes in flight plus simulation-only metadata (never on the wire)."""

    __slots__ = ("raw", "sent_at", "arrived", "meta")

    def __init__(self, raw: bytes, sent_at: int, arrived: int, meta=None):
        self.raw = raw
        self.sent_at = sent_at
        self.arrived = arrived
        self.meta = meta


@dataclass
class LinkStats:
    frames: int = 0
    bytes: int = 0
    dropped: int = 0
    corrupted: int = 0
    pfc: int = 0


class Link:
    """One direction of the wire.

    ``deliver(packet)`` is invoked at the receiver when a frame arrives.
    Queue items are ``(ready_at, item)``; when an item reaches the head and
    the wire is free, ``build(item, now)`` turns it into ``(raw, meta,
    trace_seq)`` so sequence numbers are bound at transmission time.
    ``gate(nbytes, now)`` may hold the head back by returning a retry time.
    """

    def __init__(self, engine, config: LinkConfig, deliver: Callable,
                 build: Callable, faults: FaultConfig = FaultConfig(),
                 name: str = "link", gate: Optional[Callable] = None):
        self.engine = engine
        self.config = config
        self.deliver = deliver
        self.build = build
        self.faults = faults
        self.name = name
        self.gate = gate
        self.rng: random.Random = engine.rng(f"faults/{name}")
        self._trace = {}
        for action, seq in faults.trace:
            self._trace.setdefault(seq, deque()).append(action)
        self.queue: deque = deque()
        self._free_ps = 0
        self._pump_at: Optional[int] = None
        self.paused_until = 0
        self.stats = LinkStats()
        self.tx_log: Optional[list] = None  # (start_ns, nbytes) when enabled
        self._fixed = config.processing_ns + config.propagation_ns
        self._ser_cache: dict[int, int] = {}

    def send(self, item, ready_at: int) -> None:
        self.queue.append((ready_at, item))
        if self._pump_at is None:
            self._arm(max(ready_at, self.engine.now))

    def _arm(self, t: int) -> None:
        free_ns = -(-self._free_ps // PS_PER_NS)
        t = max(t, free_ns, self.paused_until)
        self._pump_at = t
        self.engine.schedule(t, self._pump)

    def kick(self) -> None:
        """Re-evaluate the head, e.g. after a gate's rate or a pause changed."""
        if self._pump_at is None and self.queue:
            self._arm(max(self.queue[0][0], self.engine.now))

    def _pump(self, _=None) -> None:
        self._pump_at = None
        now = self.engine.now
        queue = self.queue
        if not queue:
            return
        if now < self.paused_until:
            self._arm(self.paused_until)
            return
        ready, item = queue[0]
        if ready > now:
            self._arm(ready)
            return
        now_ps = now * PS_PER_NS
        free_ps = self._free_ps
        if free_ps > now_ps:
            self._arm(now)
            return
        nbytes = item.nbytes
        if self.gate is not None:
            retry = self.gate(nbytes, now)
            if retry is not None:
                self._arm(retry)
                return
        queue.popleft()
        # events fire on whole ns; recover the sub-ns remainder so a busy wire
        # starts the next frame exactly where the previous one ended
        start_ps = now_ps - PS_PER_NS + 1
        if free_ps > start_ps:
            start_ps = free_ps
        if ready * PS_PER_NS > start_ps:
            start_ps = ready * PS_PER_NS
        end_ps = self._send_one(item, nbytes, start_ps, now)
        # Back-to-back frames starting within the look-ahead are committed
        # now, each built with the start time it would have had anyway.
        horizon = now + self.config.batch_ns
        gate = self.gate
        while queue:
            ready, item = queue[0]
            t = -(-end_ps // PS_PER_NS)
            if ready > t:
                t = ready
            if t > horizon or self.paused_until > t:
                break
            nbytes = item.nbytes
            if gate is not None and gate(nbytes, t) is not None:
                break
            queue.popleft()
            start_ps = t * PS_PER_NS - PS_PER_NS + 1
            if end_ps > start_ps:
                start_ps = end_ps
            if ready * PS_PER_NS > start_ps:
                start_ps = ready * PS_PER_NS
            end_ps = self._send_one(item, nbytes, start_ps, t)
        if queue:
            # next pump: when the head is ready and the wire is free
            t = queue[0][0]
            free_ns = -(-end_ps // PS_PER_NS)
            if free_ns > t:
                t = free_ns
            if now > t:
                t = now
            if self.paused_until > t:
                t = self.paused_until
            self._pump_at = t
            self.engine.schedule(t, self._pump)

    def _send_one(self, item, nbytes: int, start_ps: int, now: int) -> int:
        ser = self._ser_cache.get(nbytes)
        if ser is None:
            ser = self._ser_cache[nbytes] = self.config.serialization_ps(nbytes)
        self._free_ps = end_ps = start_ps + ser
        raw, meta, trace_seq = self.build(item, now)
        st = self.stats
        st.frames += 1
        st.bytes += nbytes
        if self.tx_log is not None:
            self.tx_log.append((now, nbytes))
        if self.faults.active:
            self._transmit(raw, meta, trace_seq, now, end_ps)
        else:
            arrive = -(-end_ps // PS_PER_NS) + self._fixed
            self.engine.schedule(arrive, self.deliver, Packet(raw, now, arrive, meta))
        return end_ps

    def _transmit(self, raw, meta, trace_seq, now, end_ps) -> None:
        f = self.faults
        if f.active:
            action = None
            if trace_seq is not None and trace_seq in self._trace:
                pending = self._trace[trace_seq]
                action = pending.popleft()
                if not pending:
                    del self._trace[trace_seq]
            else:
                r = self.rng.random()
                if r < f.drop_probability:
                    action = "DROP"
                elif r < f.drop_probability + f.corrupt_probability:
                    action = "CORRUPT"
            if action == "DROP":
                self.stats.dropped += 1
                return
            if action == "CORRUPT":
                self.stats.corrupted += 1
                nbits = (len(raw) - HEADER_LEN - CRC_LEN) * 8
                raw = flip_bit(raw, HEADER_LEN * 8 + self.rng.randrange(nbits))
        arrive = -(-end_ps // PS_PER_NS) + self._fixed
        self.engine.schedule(arrive, self.deliver, Packet(raw, now, arrive, meta))

    def send_pfc(self, raw: bytes, meta=None) -> int:
        """Out-of-band PFC: serialization plus propagation, no queueing, no faults
        unless the fault config opts in. Returns the arrival time."""
        now = self.engine.now
        self.stats.pfc += 1
        if self.faults.pfc_faults and self.faults.active:
            r = self.rng.random()
            if r < self.faults.drop_probability:
                self.stats.dropped += 1
                return -1
        ser_ps = self.config.serialization_ps(len(raw))
        arrive = now + -(-ser_ps // PS_PER_NS) + self.config.propagation_ns
        self.engine.schedule(arrive, self.deliver, Packet(raw, now, arrive, meta))
        return arrive

    def pause(self, until: int) -> None:
        """Naive 802.1Qbb-style pause: hold the queue until ``until``."""
        if until > self.paused_until:
            self.paused_until = until
