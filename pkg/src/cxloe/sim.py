"""Deterministic discrete-event engine.

Virtual time is an integer nanosecond count. Events with equal timestamps
dispatch in insertion order, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import hashlib
import heapq
from heapq import heappush
import random
from collections import Counter
from dataclasses import dataclass
from typing import Any, Callable, Optional, TextIO

MAX_TIME = 2**64 - 1

NS = 1
US = 1_000
MS = 1_000_000

# 250 MHz fabric clock
CYCLE_NS = 4


class SchedulingInPast(ValueError):
    pass


def saturate(t: int) -> int:
    return MAX_TIME if t > MAX_TIME else t


def cycles(n: int) -> int:
    return n * CYCLE_NS


def rng_stream(seed: int, stream_id: str) -> random.Random:
    """Independent RNG for one consumer.

    The stream is keyed by ``(seed, stream_id)`` so adding a consumer never
    shifts the draws another consumer sees.
    """
    digest = hashlib.blake2b(f"{seed}/{stream_id}".encode(), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "big"))


@dataclass(frozen=True)
class RunStats:
    processed: int
    now: int


def payload_kind(payload: Any) -> str:
    kind = getattr(payload, "kind", None)
    if isinstance(kind, str):
        return kind
    if isinstance(payload, tuple) and payload and isinstance(payload[0], str):
        return payload[0]
    return type(payload).__name__


def target_label(target: Callable) -> str:
    owner = getattr(target, "__self__", None)
    name = getattr(target, "__name__", repr(target)).lstrip("_")
    if owner is None:
        return name
    return f"{getattr(owner, 'name', type(owner).__name__)}.{name}"


class Engine:
    """Single-threaded event loop.

    ``target`` is any callable taking the payload; components pass bound
    methods. Heap entries are ``(fire_at, seq_no, target, payload)`` so the
    ordering is total without ever comparing targets or payloads.
    """

    def __init__(self, seed: int = 0, trace: Optional[TextIO] = None):
        self.seed = seed
        self.now = 0
        self.metrics: Counter = Counter()
        self._heap: list = []
        self._seq = 0
        self._stopped = False
        self.trace = trace

    def rng(self, stream_id: str) -> random.Random:
        return rng_stream(self.seed, stream_id)

    def schedule(self, fire_at: int, target: Callable, payload: Any = None) -> int:
        if fire_at < self.now:
            raise SchedulingInPast(f"fire_at={fire_at} < now={self.now}")
        seq = self._seq
        self._seq = seq + 1
        if fire_at > MAX_TIME:
            fire_at = MAX_TIME
        heappush(self._heap, (fire_at, seq, target, payload))
        return seq

    def after(self, delay: int, target: Callable, payload: Any = None) -> int:
        return self.schedule(self.now + delay, target, payload)

    def stop(self) -> None:
        """Make the current run call return after the event in progress."""
        self._stopped = True

    @property
    def pending(self) -> int:
        return len(self._heap)

    def run_until(self, t_end: int) -> RunStats:
        """Process every event with ``fire_at <= t_end``; time ends at ``t_end``."""
        stats = self._loop(t_end)
        if not self._stopped and self.now < t_end:
            self.now = t_end
        self._stopped = False
        return stats

    def run(self) -> RunStats:
        """Run until the queue empties or a component calls :meth:`stop`."""
        stats = self._loop(MAX_TIME)
        self._stopped = False
        return stats

    def _loop(self, t_end: int) -> RunStats:
        heap = self._heap
        pop = heapq.heappop
        trace = self.trace
        n = 0
        if trace is None:
            while heap and not self._stopped:
                if heap[0][0] > t_end:
                    break
                t, _, target, payload = pop(heap)
                self.now = t
                target(payload)
                n += 1
            return RunStats(n, self.now)
        while heap and not self._stopped:
            if heap[0][0] > t_end:
                break
            t, _, target, payload = pop(heap)
            self.now = t
            trace.write(f"{t}\t{target_label(target)}\t{payload_kind(payload)}\n")
            target(payload)
            n += 1
        return RunStats(n, self.now)
