"""Sliding-window reliability: retry buffer, reorder buffer, SACK/NAK/ACK.

Sequence numbers are 16-bit serial numbers; windows never exceed 512
entries so serial comparisons are always well defined.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .wire import FLAG_ACK, FLAG_NAK, FLAG_SACK, SackNak, seq_add, seq_diff

WINDOW = 512
DEFAULT_RTO_NS = 20_000


class WindowFull(RuntimeError):
    pass


class UnknownSeq(KeyError):
    pass


class ReorderOverflow(RuntimeError):
    pass


@dataclass
class RetryEntry:
    frame: Any
    sent_at: int
    sack_marked: bool = False


class RetryBuffer:
    """Transmit-side history of unacknowledged frames, keyed by seq.

    Keys always form the contiguous serial range ``[base, next_seq)``.
    ``retransmits`` counts frames handed back for resending and
    ``gbn_equivalent`` counts what Go-Back-N would have resent for the same
    triggers (everything from the lowest resent seq up to ``next_seq``).
    """

    def __init__(self, capacity: int = WINDOW, rto_ns: int = DEFAULT_RTO_NS, start: int = 0):
        self.capacity = capacity
        self.rto_ns = rto_ns
        self.base = start
        self.next_seq = start
        self._entries: OrderedDict[int, RetryEntry] = OrderedDict()
        self.retransmits = 0
        self.gbn_equivalent = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, seq: int) -> bool:
        return seq in self._entries

    @property
    def full(self) -> bool:
        return len(self._entries) >= self.capacity

    def seqs(self) -> list[int]:
        return list(self._entries)

    def entry(self, seq: int) -> RetryEntry:
        try:
            return self._entries[seq]
        except KeyError:
            raise UnknownSeq(seq) from None

    def record(self, seq: int, frame: Any, now: int) -> None:
        if seq != self.next_seq:
            raise ValueError(f"expected seq {self.next_seq}, got {seq}")
        if self.full:
            raise WindowFull(f"{len(self._entries)} frames outstanding")
        self._entries[seq] = RetryEntry(frame, now)
        self.next_seq = seq_add(seq, 1)

    def on_ack(self, cum_ack: int) -> int:
        """Release everything up to and including ``cum_ack``.

        Acks outside ``[base-1, next_seq-1]`` are stale or bogus and ignored.
        """
        n = seq_diff(cum_ack, self.base) + 1
        if n <= 0 or n > len(self._entries):
            return 0
        pop = self._entries.popitem
        for _ in range(n):
            pop(last=False)
        self.base = seq_add(cum_ack, 1)
        return n

    def _in_window(self, seq: int) -> bool:
        return 0 <= seq_diff(seq, self.base) < len(self._entries)

    def on_sack_nak(self, sack: Optional[int] = None, nak: Optional[int] = None,
                    cum_ack: Optional[int] = None) -> list[int]:
        """Apply a SACK/NAK/ACK combination; returns seqs to resend, in order.

        The SACKed entry is marked. Resent are the unmarked entries strictly
        between the previous boundary and the SACK, where the boundary is
        the highest earlier mark below the SACK, or the window base.
        """
        if cum_ack is not None:
            self.on_ack(cum_ack)
        for ref in (sack, nak):
            if ref is not None and ref not in self._entries:
                # released by the piggybacked ack, or never sent
                if cum_ack is not None and seq_diff(ref, cum_ack) <= 0:
                    continue
                raise UnknownSeq(ref)
        out: list[int] = []
        entries = self._entries
        if sack is not None and sack in entries:
            # keys are contiguous, so walk down from the SACK to the previous mark
            base = self.base
            d = seq_diff(sack, base)
            lo = 0
            for k in range(d - 1, -1, -1):
                if entries[(base + k) & 0xFFFF].sack_marked:
                    lo = k + 1
                    break
            out = [(base + k) & 0xFFFF for k in range(lo, d)]
            entries[sack].sack_marked = True
        if nak is not None and nak in self._entries and nak not in out:
            out.append(nak)
            out.sort(key=lambda s: seq_diff(s, self.base))
        self._count(out)
        return out

    def on_timeout(self, now: int) -> list[int]:
        """Entries whose last send is at least one RTO old; their timers restart."""
        out = []
        for seq, e in self._entries.items():
            if e.sent_at + self.rto_ns <= now:
                out.append(seq)
                e.sent_at = now
        self._count(out)
        return out

    def next_deadline(self) -> Optional[int]:
        if not self._entries:
            return None
        return min(e.sent_at for e in self._entries.values()) + self.rto_ns

    def mark_sent(self, seq: int, now: int) -> None:
        e = self._entries.get(seq)
        if e is not None:
            e.sent_at = now

    def _count(self, resend: list[int]) -> None:
        if resend:
            self.retransmits += len(resend)
            self.gbn_equivalent += seq_diff(self.next_seq, resend[0])


class GoBackN:
    """Reference sender: any loss signal resends the whole window from the lost seq."""

    def __init__(self, capacity: int = WINDOW, rto_ns: int = DEFAULT_RTO_NS, start: int = 0):
        self.buf = RetryBuffer(capacity, rto_ns, start)
        self.retransmits = 0

    def record(self, seq, frame, now):
        self.buf.record(seq, frame, now)

    def on_ack(self, cum_ack: int) -> int:
        return self.buf.on_ack(cum_ack)

    def on_nak(self, nak: int, cum_ack: Optional[int] = None) -> list[int]:
        if cum_ack is not None:
            self.buf.on_ack(cum_ack)
        seqs = self.buf.seqs()
        if nak not in seqs:
            return []
        out = seqs[seqs.index(nak):]
        self.retransmits += len(out)
        return out

    def on_timeout(self, now: int) -> list[int]:
        expired = self.buf.on_timeout(now)
        if not expired:
            return []
        seqs = self.buf.seqs()
        out = seqs[seqs.index(expired[0]):]
        for s in out:
            self.buf.mark_sent(s, now)
        self.retransmits += len(out)
        return out


# -- receive side ------------------------------------------------------------

class RxKind(Enum):
    DELIVER = "deliver"
    HELD = "held"
    GAP = "gap"
    STALE = "stale"
    DUPLICATE = "duplicate"


@dataclass
class RxResult:
    kind: RxKind
    delivered: list = field(default_factory=list)  # [(seq, frame)] in order
    nak: Optional[int] = None


class ReorderBuffer:
    """Receive-side buffer that releases frames strictly in seq order.

    A new hole in the sequence produces exactly one GAP result naming the
    first missing seq; later arrivals beyond the same hole are HELD.
    """

    def __init__(self, capacity: int = WINDOW, start: int = 0):
        self.capacity = capacity
        self.expected = start
        self._held: dict[int, Any] = {}
        self._highest: Optional[int] = None  # highest held seq

    def __len__(self) -> int:
        return len(self._held)

    def held(self) -> list[int]:
        return sorted(self._held, key=lambda s: seq_diff(s, self.expected))

    def on_frame(self, seq: Optional[int], crc_ok: bool = True, frame: Any = None) -> RxResult:
        if not crc_ok:
            return RxResult(RxKind.GAP, nak=self.expected if seq is None else seq)
        d = seq_diff(seq, self.expected)
        if d < 0:
            return RxResult(RxKind.STALE)
        if d == 0:
            out = [(seq, frame)]
            nxt = seq_add(seq, 1)
            held = self._held
            while nxt in held:
                out.append((nxt, held.pop(nxt)))
                nxt = seq_add(nxt, 1)
            self.expected = nxt
            if not held:
                self._highest = None
            return RxResult(RxKind.DELIVER, out)
        if seq in self._held:
            return RxResult(RxKind.DUPLICATE)
        if d >= self.capacity or len(self._held) >= self.capacity:
            raise ReorderOverflow(f"seq {seq} is {d} ahead of {self.expected}")
        self._held[seq] = frame
        if self._highest is None:
            hole = self.expected
            self._highest = seq
        else:
            ahead = seq_diff(seq, self._highest)
            if ahead <= 0:
                return RxResult(RxKind.HELD)
            hole = seq_add(self._highest, 1)
            self._highest = seq
        if hole == seq:
            return RxResult(RxKind.HELD)
        return RxResult(RxKind.GAP, nak=hole)


@dataclass
class PendingControl:
    pending_nak: Optional[int] = None
    pending_sack: Optional[int] = None
    pending_ack: Optional[int] = None

    def clear(self) -> None:
        self.pending_nak = self.pending_sack = self.pending_ack = None


def compose_control(p: PendingControl, src: bytes = bytes(6), dst: bytes = bytes(6)) -> Optional[SackNak]:
    """Build a SACK+NAK(+ACK) frame once a later frame has followed the gap.

    A lone NAK is held back until a subsequent frame arrives; plain ACKs are
    never produced here because they go out immediately on their own.
    """
    if p.pending_nak is None or p.pending_sack is None:
        return None
    flags = FLAG_SACK | FLAG_NAK
    cum = 0
    if p.pending_ack is not None:
        flags |= FLAG_ACK
        cum = p.pending_ack
    return SackNak(src, dst, flags, p.pending_sack, p.pending_nak, cum)
