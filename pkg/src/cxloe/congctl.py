"""PFC-driven rate control and the token bucket that enforces the rate.

Rates are integer bits per second and times are integer nanoseconds, so the
halving, 3/4, 7/8 and midpoint steps are exact for the trajectories that
matter (100 Gbps halves cleanly nine times) and replay bit-for-bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, TextIO

GBPS = 1_000_000_000
MBPS = 1_000_000
US = 1_000


class Phase(Enum):
    STABLE_RUNNING = "stable_running"
    PFC_RESPONSE = "pfc_response"
    FAST_RECOVERY = "fast_recovery"
    FAST_RECOVERY_PFC_RESPONSE = "fast_recovery_pfc_response"
    INCREMENT_EXPLORATION = "increment_exploration"
    INCREMENT_GUESSING = "increment_guessing"


@dataclass(frozen=True)
class CcParams:
    t1: int = 50 * US
    t2: int = 10 * US
    t3: int = 11 * US
    t4: int = 200 * US
    t5: int = 40 * US
    t6: int = 20 * US
    increment: int = 1 * GBPS
    speedup_count_max: int = 5
    line_rate: int = 100 * GBPS
    min_rate: int = 1 * GBPS

    def __post_init__(self):
        for name in ("t1", "t2", "t3", "t4", "t5", "t6", "increment",
                     "speedup_count_max", "line_rate", "min_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.min_rate > self.line_rate:
            raise ValueError("min_rate exceeds line_rate")
        if self.t2 >= self.t1:
            raise ValueError("t2 must be shorter than t1")


@dataclass
class CcState:
    phase: Phase
    cr: int
    tr: int
    deadline: int
    last_pfc_at: Optional[int] = None
    speedups_done: int = 0
    rate_before_increment: int = 0


class CongestionController:
    """Six-phase rate state machine.

    Feed it :meth:`on_pfc` and :meth:`on_deadline`; ``state.deadline`` says
    when the next deadline is due. ``generation`` bumps whenever the
    deadline moves so callers can discard stale timer events.
    """

    def __init__(self, params: CcParams = CcParams(), now: int = 0,
                 initial_rate: Optional[int] = None):
        self.params = params
        cr = params.line_rate if initial_rate is None else initial_rate
        if not params.min_rate <= cr <= params.line_rate:
            raise ValueError("initial rate outside [min_rate, line_rate]")
        self.state = CcState(Phase.STABLE_RUNNING, cr, cr, now + params.t4,
                             rate_before_increment=cr)
        self.generation = 0
        self.pfc_received = 0
        self.pfc_ignored = 0
        self.pfc_accepted: list[int] = []
        self.trace: list[tuple[int, Phase, int, int]] = [(now, Phase.STABLE_RUNNING, cr, cr)]

    def current_rate(self, now: Optional[int] = None) -> int:
        return self.state.cr

    def _floor(self, rate) -> int:
        return max(int(rate), self.params.min_rate)

    def _arm(self, now: int, delay: int) -> None:
        self.state.deadline = now + delay
        self.generation += 1

    def _record(self, now: int) -> None:
        s = self.state
        self.trace.append((now, s.phase, s.cr, s.tr))

    def on_pfc(self, now: int) -> bool:
        """Returns False when the PFC was dropped as a duplicate."""
        p, s = self.params, self.state
        self.pfc_received += 1
        if s.last_pfc_at is not None and now - s.last_pfc_at < p.t2:
            self.pfc_ignored += 1
            return False
        ph = s.phase
        if ph is Phase.STABLE_RUNNING:
            s.tr = s.cr
            s.cr = self._floor(s.cr // 2)
            s.phase = Phase.PFC_RESPONSE
            self._arm(now, p.t1)
        elif ph is Phase.PFC_RESPONSE:
            s.cr = self._floor(s.cr // 2)
            self._arm(now, p.t1)
        elif ph is Phase.FAST_RECOVERY:
            s.tr = s.cr * 7 // 8
            s.cr = self._floor(s.cr * 3 // 4)
            s.phase = Phase.FAST_RECOVERY_PFC_RESPONSE
            self._arm(now, p.t1)
        elif ph is Phase.FAST_RECOVERY_PFC_RESPONSE:
            s.cr = self._floor(s.cr * 3 // 4)
            self._arm(now, p.t1)
        elif ph is Phase.INCREMENT_EXPLORATION:
            s.cr = self._floor(s.cr - p.increment)
            s.phase = Phase.INCREMENT_GUESSING
            self._arm(now, p.t6)
        else:  # INCREMENT_GUESSING
            s.tr = s.cr
            s.cr = self._floor(s.cr // 2)
            s.phase = Phase.PFC_RESPONSE
            self._arm(now, p.t1)
        s.last_pfc_at = now
        self.pfc_accepted.append(now)
        self._record(now)
        return True

    def on_deadline(self, now: int) -> None:
        p, s = self.params, self.state
        ph = s.phase
        if ph in (Phase.PFC_RESPONSE, Phase.FAST_RECOVERY_PFC_RESPONSE):
            s.phase = Phase.FAST_RECOVERY
            s.speedups_done = 0
            self._arm(now, p.t3)
        elif ph is Phase.FAST_RECOVERY:
            # tr can sit below the floor when 7/8 was taken from a floored rate
            s.cr = self._floor(min((s.cr + s.tr) // 2, p.line_rate))
            s.speedups_done += 1
            if s.speedups_done >= p.speedup_count_max:
                s.phase = Phase.STABLE_RUNNING
                self._arm(now, p.t4)
            else:
                self._arm(now, p.t3)
        elif ph is Phase.STABLE_RUNNING:
            s.phase = Phase.INCREMENT_EXPLORATION
            s.rate_before_increment = s.cr
            self._arm(now, p.t5)
        elif ph is Phase.INCREMENT_EXPLORATION:
            if s.cr < p.line_rate:
                s.cr = min(s.cr + p.increment, p.line_rate)
            if s.cr >= p.line_rate:
                s.phase = Phase.STABLE_RUNNING
                self._arm(now, p.t4)
            else:
                self._arm(now, p.t5)
        else:  # INCREMENT_GUESSING
            s.phase = Phase.STABLE_RUNNING
            self._arm(now, p.t4)
        self._record(now)


def write_rate_trace(trace, out: TextIO) -> None:
    """CSV ``time_ns,phase,cr_mbps,tr_mbps``."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["time_ns", "phase", "cr_mbps", "tr_mbps"])
    for t, phase, cr, tr in trace:
        w.writerow([t, phase.value, f"{cr / MBPS:.3f}", f"{tr / MBPS:.3f}"])


class FrameLargerThanBucket(ValueError):
    pass


class TokenBucket:
    """Shaper whose fill rate follows the controller's current rate.

    Tokens are kept as bits scaled by 1e9 so a refill of ``rate_bps * dt_ns``
    stays an exact integer.
    """

    def __init__(self, capacity_bits: int, rate_bps: int, now: int = 0, full: bool = True):
        if capacity_bits <= 0 or rate_bps <= 0:
            raise ValueError("capacity and rate must be positive")
        self.capacity_bits = capacity_bits
        self.rate = rate_bps
        self._cap = capacity_bits * GBPS
        self._tokens = self._cap if full else 0
        self.last_refill = now

    @property
    def tokens_bits(self) -> Fraction:
        return Fraction(self._tokens, GBPS)

    def _refill(self, now: int) -> None:
        dt = now - self.last_refill
        if dt > 0:
            t = self._tokens + self.rate * dt
            self._tokens = t if t < self._cap else self._cap
            self.last_refill = now

    def set_rate(self, rate_bps: int, now: int) -> None:
        """Account for the time at the old rate before switching."""
        self._refill(now)
        self.rate = rate_bps

    def wait_ns(self, nbytes: int, now: int) -> Fraction:
        """Exact (fractional) nanoseconds until ``nbytes`` could be granted."""
        self._refill(now)
        need = nbytes * 8 * GBPS - self._tokens
        return Fraction(max(need, 0), self.rate)

    def acquire(self, nbytes: int, now: int) -> Optional[int]:
        """Take tokens for one frame.

        Returns None when granted, else the earliest integer nanosecond at
        which the frame would fit at the current rate.
        """
        cost = nbytes * 8 * GBPS
        if cost > self._cap:
            raise FrameLargerThanBucket(f"{nbytes} bytes > {self.capacity_bits} bits")
        self._refill(now)
        if self._tokens >= cost:
            self._tokens -= cost
            return None
        need = cost - self._tokens
        return now + -(-need // self.rate)
