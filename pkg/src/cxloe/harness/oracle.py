"""Flat-map memory oracle.

Replays the logical operation log in issue order against a plain dict and
checks every read's returned data, then checks the final pool contents for
every touched line.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Iterable, Optional

from ..cache import Op
from ..mn import load_pool

LINE = 64
ZERO = bytes(LINE)
LOCAL_BACKEND = "local_fpga_dram"  # lines live in CN-local DRAM, addressed by CMem


@dataclass
class OracleResult:
    passed: bool
    reads_checked: int
    lines_checked: int
    req_id: Optional[int] = None  # first divergence
    addr: Optional[int] = None
    reason: str = ""

    def as_dict(self) -> dict:
        return {"passed": self.passed, "reads_checked": self.reads_checked,
                "lines_checked": self.lines_checked, "req_id": self.req_id,
                "addr": None if self.addr is None else f"0x{self.addr:x}", "reason": self.reason}


def verify(ops: Iterable[tuple], pool: dict[int, bytes], to_pool,
           skip: Optional[int] = None, check_pool: bool = True) -> OracleResult:
    """``ops`` are ``(req_id, op, cmem_addr, data[, completed])``; ``to_pool`` maps CMem to pool.

    Requests cut off by the end of a time-bounded run are ambiguous: an
    incomplete write may or may not have reached the pool, and an incomplete
    read returned nothing. ``skip`` drops one request id from the replay
    (negative control).
    """
    allowed: dict[int, set] = {}  # line -> values it may hold now
    last_writer: dict[int, int] = {}
    reads = 0
    for entry in sorted(ops, key=lambda o: o[0]):
        req_id, op, addr, data = entry[:4]
        done = entry[4] if len(entry) > 4 else True
        if req_id == skip:
            continue
        if op is Op.WRITE:
            if done:
                allowed[addr] = {data}
            else:
                allowed.setdefault(addr, {ZERO}).add(data)
            last_writer[addr] = req_id
        elif done:
            reads += 1
            values = allowed.get(addr, (ZERO,))
            if data not in values:
                return OracleResult(False, reads, 0, req_id, addr, "read returned stale data")
            allowed[addr] = {data}
    lines = 0
    if check_pool:
        for addr in sorted(allowed):
            if addr not in last_writer:
                continue
            lines += 1
            if pool.get(to_pool(addr), ZERO) not in allowed[addr]:
                return OracleResult(False, reads, lines, last_writer[addr], addr,
                                    "final pool contents differ")
    return OracleResult(True, reads, lines)


def translator_from_mapping(mapping, cn_id: bytes, page_bytes: int):
    pages = {p: m for c, p, m in mapping if c == cn_id}

    def to_pool(addr: int) -> int:
        page, off = divmod(addr, page_bytes)
        return pages[page] * page_bytes + off

    return to_pool


def verify_result(result, skip: Optional[int] = None) -> OracleResult:
    """Oracle over an in-memory :class:`RunResult`."""
    cn_id = bytes.fromhex(result.config.cn.mac.replace(":", ""))
    ops = [(r.req_id, r.op, r.addr, r.data, r.t_complete >= 0) for r in result.records]
    if result.config.cn.backend.value == LOCAL_BACKEND:
        to_pool = _identity
    else:
        to_pool = translator_from_mapping(result.mapping, cn_id, result.page_bytes)
    return verify(ops, dict(result.pool), to_pool, skip, pool_checkable(result))


def _identity(addr: int) -> int:
    return addr


def pool_checkable(result) -> bool:
    """Dirty lines stay in the cache when a run is cut off before the flush."""
    return result.drained or not result.config.cn.cache_enabled


def verify_run_dir(run_dir: str, skip: Optional[int] = None) -> OracleResult:
    """Oracle over the artifacts written by a run (ops.csv, pool.bin, mapping.csv, report.json)."""
    from .scenario import read_ops_csv
    with open(os.path.join(run_dir, "report.json")) as fh:
        report = json.load(fh)
    check_pool = report.get("pool_checkable", True)
    with open(os.path.join(run_dir, "ops.csv"), newline="") as fh:
        ops = read_ops_csv(fh)
    with open(os.path.join(run_dir, "pool.bin"), "rb") as fh:
        pool = load_pool(fh.read())
    if report.get("backend") == LOCAL_BACKEND:
        return verify(ops, pool, _identity, skip, check_pool)
    mapping = []
    page_bytes = None
    with open(os.path.join(run_dir, "mapping.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            mapping.append((bytes.fromhex(row["cn_id"]), int(row["cmem_page"]), int(row["pool_page"])))
            page_bytes = int(row["page_bytes"])
    if not mapping:
        return OracleResult(False, 0, 0, reason="mapping.csv is empty")
    cn_ids = {c for c, _, _ in mapping}
    if len(cn_ids) != 1:
        return OracleResult(False, 0, 0, reason="expected exactly one compute node in mapping.csv")
    return verify(ops, pool, translator_from_mapping(mapping, cn_ids.pop(), page_bytes), skip, check_pool)
