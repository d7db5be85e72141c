"""Custom Ethernet frame formats for carrying memory requests.

Every frame is a 14-byte Ethernet header followed by a one-byte command and
the variant body. All multi-byte fields are big-endian. A CRC-32 trailer
(IEEE 802.3, as computed by :func:`zlib.crc32`) follows the frame and is not
counted in the lengths below.

======== ======= ================================================
command  length  body after the command byte
======== ======= ================================================
0x01     25      seq, arid, address(48)
0x02     89      seq, awid, address(48), data(64)
0x03     91      resp_seq, req_seq, cum_ack, axi_id, rsvd(4), data(64)
0x04     23      resp_seq, req_seq, cum_ack, axi_id
0x05     17      cum_ack
0x06     22      flags, sack_seq, nak_seq, cum_ack
0x07     18      class, pause_quanta
======== ======= ================================================
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields
from typing import ClassVar, Union

ETHERTYPE = 0x88B5
HEADER_LEN = 14
CRC_LEN = 4
LINE_BYTES = 64
ADDR_MAX = (1 << 48) - 1

SEQ_BITS = 16
SEQ_MOD = 1 << SEQ_BITS
SEQ_HALF = SEQ_MOD >> 1

# SackNak flag bits
FLAG_SACK = 0x01
FLAG_NAK = 0x02
FLAG_ACK = 0x04


class FieldOverflow(ValueError):
    pass


class DecodeError(ValueError):
    pass


class CrcError(DecodeError):
    pass


class UnknownCommand(DecodeError):
    pass


class Truncated(DecodeError):
    pass


def mac(text: str) -> bytes:
    """``"02:00:00:00:00:01"`` -> 6 bytes."""
    raw = bytes(int(part, 16) for part in text.split(":"))
    if len(raw) != 6:
        raise ValueError(f"bad MAC address {text!r}")
    return raw


def mac_str(addr: bytes) -> str:
    return ":".join(f"{b:02x}" for b in addr)


# -- sequence-number arithmetic ---------------------------------------------

def seq_add(a: int, n: int) -> int:
    return (a + n) % SEQ_MOD


def seq_diff(a: int, b: int) -> int:
    """Signed serial distance ``a - b`` in ``[-2**15, 2**15)``."""
    return (a - b + SEQ_HALF) % SEQ_MOD - SEQ_HALF


def seq_cmp(a: int, b: int) -> int:
    """Serial-number comparison: -1, 0 or 1.

    Only defined while the two values are less than half the sequence
    space apart; the 512-entry window keeps callers well inside that.
    """
    d = (b - a) % SEQ_MOD
    if d == 0:
        return 0
    if d == SEQ_HALF:
        raise ValueError(f"seq_cmp undefined for {a} and {b}")
    return -1 if d < SEQ_HALF else 1


# -- frame variants ----------------------------------------------------------

@dataclass(frozen=True)
class ReadReq:
    src: bytes
    dst: bytes
    seq: int
    arid: int
    address: int
    command: ClassVar[int] = 0x01
    kind: ClassVar[str] = "read_req"


@dataclass(frozen=True)
class WriteReq:
    src: bytes
    dst: bytes
    seq: int
    awid: int
    address: int
    data: bytes
    command: ClassVar[int] = 0x02
    kind: ClassVar[str] = "write_req"


@dataclass(frozen=True)
class ReadResp:
    src: bytes
    dst: bytes
    resp_seq: int
    req_seq: int
    cum_ack: int
    data: bytes
    axi_id: int = 0
    command: ClassVar[int] = 0x03
    kind: ClassVar[str] = "read_resp"


@dataclass(frozen=True)
class WriteResp:
    src: bytes
    dst: bytes
    resp_seq: int
    req_seq: int
    cum_ack: int
    axi_id: int = 0
    command: ClassVar[int] = 0x04
    kind: ClassVar[str] = "write_resp"


@dataclass(frozen=True)
class Ack:
    src: bytes
    dst: bytes
    cum_ack: int
    command: ClassVar[int] = 0x05
    kind: ClassVar[str] = "ack"


@dataclass(frozen=True)
class SackNak:
    src: bytes
    dst: bytes
    flags: int
    sack_seq: int = 0
    nak_seq: int = 0
    cum_ack: int = 0
    command: ClassVar[int] = 0x06
    kind: ClassVar[str] = "sack_nak"

    @property
    def sack(self):
        return self.sack_seq if self.flags & FLAG_SACK else None

    @property
    def nak(self):
        return self.nak_seq if self.flags & FLAG_NAK else None

    @property
    def ack(self):
        return self.cum_ack if self.flags & FLAG_ACK else None


@dataclass(frozen=True)
class Pfc:
    src: bytes
    dst: bytes
    pfc_class: int = 0
    pause_quanta: int = 0
    command: ClassVar[int] = 0x07
    kind: ClassVar[str] = "pfc"


Frame = Union[ReadReq, WriteReq, ReadResp, WriteResp, Ack, SackNak, Pfc]
VARIANTS = (ReadReq, WriteReq, ReadResp, WriteResp, Ack, SackNak, Pfc)
BY_COMMAND = {cls.command: cls for cls in VARIANTS}

_HDR = "!6s6sHB"
_S = {
    ReadReq: struct.Struct(_HDR + "HHHI"),
    WriteReq: struct.Struct(_HDR + "HHHI64s"),
    ReadResp: struct.Struct(_HDR + "HHHH4x64s"),
    WriteResp: struct.Struct(_HDR + "HHHH"),
    Ack: struct.Struct(_HDR + "H"),
    SackNak: struct.Struct(_HDR + "BHHH"),
    Pfc: struct.Struct(_HDR + "BH"),
}
FRAME_LEN = {cls: s.size for cls, s in _S.items()}
_CRC = struct.Struct("!I")

# field name -> bit width, for overflow checks
_WIDTHS = {
    "seq": 16, "arid": 16, "awid": 16, "address": 48, "resp_seq": 16,
    "req_seq": 16, "cum_ack": 16, "axi_id": 16, "flags": 8, "sack_seq": 16,
    "nak_seq": 16, "pfc_class": 8, "pause_quanta": 16,
}


def wire_len(frame_or_cls) -> int:
    """Bytes on the wire including the CRC trailer."""
    cls = frame_or_cls if isinstance(frame_or_cls, type) else type(frame_or_cls)
    return FRAME_LEN[cls] + CRC_LEN


def _check(frame) -> None:
    for f in fields(frame):
        value = getattr(frame, f.name)
        if f.name in ("src", "dst"):
            if not isinstance(value, (bytes, bytearray)) or len(value) != 6:
                raise FieldOverflow(f"{f.name} must be 6 bytes")
        elif f.name == "data":
            if not isinstance(value, (bytes, bytearray)) or len(value) != LINE_BYTES:
                raise FieldOverflow("data must be exactly 64 bytes")
        else:
            width = _WIDTHS[f.name]
            if not 0 <= value < (1 << width):
                raise FieldOverflow(f"{f.name}={value} exceeds {width} bits")


def encode(frame: Frame, check: bool = True) -> bytes:
    """Header + body + CRC-32."""
    if check:
        _check(frame)
    cls = type(frame)
    s = _S[cls]
    head = (frame.dst, frame.src, ETHERTYPE, cls.command)
    if cls is ReadReq:
        body = s.pack(*head, frame.seq, frame.arid, frame.address >> 32, frame.address & 0xFFFFFFFF)
    elif cls is WriteReq:
        body = s.pack(*head, frame.seq, frame.awid, frame.address >> 32,
                      frame.address & 0xFFFFFFFF, frame.data)
    elif cls is ReadResp:
        body = s.pack(*head, frame.resp_seq, frame.req_seq, frame.cum_ack, frame.axi_id, frame.data)
    elif cls is WriteResp:
        body = s.pack(*head, frame.resp_seq, frame.req_seq, frame.cum_ack, frame.axi_id)
    elif cls is Ack:
        body = s.pack(*head, frame.cum_ack)
    elif cls is SackNak:
        body = s.pack(*head, frame.flags, frame.sack_seq, frame.nak_seq, frame.cum_ack)
    else:
        body = s.pack(*head, frame.pfc_class, frame.pause_quanta)
    return body + _CRC.pack(zlib.crc32(body))


# -- hot-path packers ---------------------------------------------------------
# Same bytes as encode() on the matching variant, minus the dataclass and the
# range checks; callers guarantee field widths.

_P_RREQ, _P_WREQ = _S[ReadReq], _S[WriteReq]
_P_RRESP, _P_WRESP, _P_ACK = _S[ReadResp], _S[WriteResp], _S[Ack]


def _seal(body: bytes) -> bytes:
    return body + _CRC.pack(zlib.crc32(body))


def pack_read_req(src, dst, seq, arid, address) -> bytes:
    return _seal(_P_RREQ.pack(dst, src, ETHERTYPE, 0x01, seq, arid, address >> 32, address & 0xFFFFFFFF))


def pack_write_req(src, dst, seq, awid, address, data) -> bytes:
    return _seal(_P_WREQ.pack(dst, src, ETHERTYPE, 0x02, seq, awid, address >> 32,
                              address & 0xFFFFFFFF, data))


def pack_read_resp(src, dst, resp_seq, req_seq, cum_ack, axi_id, data) -> bytes:
    return _seal(_P_RRESP.pack(dst, src, ETHERTYPE, 0x03, resp_seq, req_seq, cum_ack, axi_id, data))


def pack_write_resp(src, dst, resp_seq, req_seq, cum_ack, axi_id) -> bytes:
    return _seal(_P_WRESP.pack(dst, src, ETHERTYPE, 0x04, resp_seq, req_seq, cum_ack, axi_id))


def pack_ack(src, dst, cum_ack) -> bytes:
    return _seal(_P_ACK.pack(dst, src, ETHERTYPE, 0x05, cum_ack))


def decode(raw: bytes) -> Frame:
    """Parse one frame; raises a :class:`DecodeError` subclass on bad input."""
    n = len(raw)
    if n < HEADER_LEN + 1 + CRC_LEN:
        raise Truncated(f"{n} bytes is shorter than any frame")
    body = raw[:-CRC_LEN]
    if zlib.crc32(body) != _CRC.unpack_from(raw, n - CRC_LEN)[0]:
        raise CrcError("CRC mismatch")
    cls = BY_COMMAND.get(body[HEADER_LEN])
    if cls is None:
        raise UnknownCommand(f"command 0x{body[HEADER_LEN]:02x}")
    s = _S[cls]
    if len(body) < s.size:
        raise Truncated(f"{cls.__name__} needs {s.size} bytes, got {len(body)}")
    if len(body) > s.size:
        raise DecodeError(f"{len(body) - s.size} trailing bytes after {cls.__name__}")
    dst, src, ethertype, _, *rest = s.unpack(body)
    if ethertype != ETHERTYPE:
        raise DecodeError(f"ethertype 0x{ethertype:04x}")
    if cls is ReadReq:
        seq, arid, hi, lo = rest
        return ReadReq(src, dst, seq, arid, (hi << 32) | lo)
    if cls is WriteReq:
        seq, awid, hi, lo, data = rest
        return WriteReq(src, dst, seq, awid, (hi << 32) | lo, data)
    if cls is ReadResp:
        resp_seq, req_seq, cum_ack, axi_id, data = rest
        return ReadResp(src, dst, resp_seq, req_seq, cum_ack, data, axi_id)
    return cls(src, dst, *rest)


def flip_bit(raw: bytes, bit: int) -> bytes:
    """Copy of ``raw`` with one bit inverted (fault injection)."""
    buf = bytearray(raw)
    buf[bit >> 3] ^= 1 << (bit & 7)
    return bytes(buf)


# -- golden corpus -----------------------------------------------------------

def _fmt_value(name: str, value) -> str:
    if name in ("src", "dst"):
        return mac_str(value)
    if name == "data":
        return value.hex()
    return f"0x{value:x}"


def format_golden(frame: Frame) -> str:
    """Text form used by the golden corpus: field listing then hex dump."""
    lines = [f"variant = {type(frame).__name__}"]
    for f in fields(frame):
        lines.append(f"{f.name} = {_fmt_value(f.name, getattr(frame, f.name))}")
    raw = encode(frame)
    lines.append("[hex]")
    for off in range(0, len(raw), 16):
        lines.append(" ".join(f"{b:02x}" for b in raw[off:off + 16]))
    return "\n".join(lines) + "\n"


def parse_golden(text: str) -> tuple[Frame, bytes]:
    """Inverse of :func:`format_golden`; returns (listed frame, dumped bytes)."""
    listing, _, dump = text.partition("[hex]")
    kv = {}
    for line in listing.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    cls = {c.__name__: c for c in VARIANTS}[kv.pop("variant")]
    args = {}
    for name, value in kv.items():
        if name in ("src", "dst"):
            args[name] = mac(value)
        elif name == "data":
            args[name] = bytes.fromhex(value)
        else:
            args[name] = int(value, 0)
    raw = bytes.fromhex("".join(dump.split()))
    return cls(**args), raw
