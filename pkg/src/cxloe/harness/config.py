"""Scenario configuration and its INI-style file format.

Files are ``key = value`` lines grouped under ``[section]`` headers. Every key
is optional; anything not given keeps the calibrated default. Unknown
sections or keys are rejected with the line they appear on.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Optional

from ..cache import CacheConfig
from ..cn import Backend, CnConfig, Pattern, WorkloadConfig
from ..congctl import CcParams
from ..fabric import FaultConfig, LinkConfig, parse_loss_trace
from ..mn import DramConfig, MnConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


@dataclass
class ScenarioConfig:
    seed: int = 1
    duration_ns: Optional[int] = None  # None: run until the workload drains
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    cn: CnConfig = field(default_factory=CnConfig)
    mn: MnConfig = field(default_factory=MnConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    faults: FaultConfig = field(default_factory=FaultConfig)
    region_bytes: Optional[int] = None  # CMem allocated for the CN; defaults to the footprint


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text: str) -> int:
    return int(text.replace("_", ""), 0)


def _opt_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none") else _int(text)


def _gbps(text: str) -> int:
    """Rates are written in Gbps (fractions allowed) and stored as bps."""
    return int(Fraction(text.strip()) * 1_000_000_000)


def _opt_gbps(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none") else _gbps(text)


def _us(text: str) -> int:
    return int(Fraction(text.strip()) * 1000)


# (section, key) -> (path into ScenarioConfig, parser)
KEYS: dict[tuple[str, str], tuple[tuple[str, ...], Callable[[str], Any]]] = {
    ("run", "seed"): (("seed",), _int),
    ("run", "duration_us"): (("duration_ns",), lambda s: None if s.strip().lower() in ("", "none") else _us(s)),
    ("run", "region_bytes"): (("region_bytes",), _opt_int),

    ("workload", "pattern"): (("workload", "pattern"), lambda s: Pattern(s.strip())),
    ("workload", "read_ratio"): (("workload", "read_ratio"), float),
    ("workload", "footprint_bytes"): (("workload", "footprint_bytes"), _int),
    ("workload", "request_count"): (("workload", "request_count"), _int),
    ("workload", "outstanding"): (("workload", "outstanding"), _int),
    ("workload", "issue_interval_ns"): (("workload", "issue_interval_ns"), _int),
    ("workload", "hotspot_fraction"): (("workload", "hotspot_fraction"), float),
    ("workload", "hotspot_bytes"): (("workload", "hotspot_bytes"), _int),

    ("cn", "mac"): (("cn", "mac"), str.strip),
    ("cn", "backend"): (("cn", "backend"), lambda s: Backend(s.strip())),
    ("cn", "tx_prep_ns"): (("cn", "tx_prep_ns"), _int),
    ("cn", "rx_done_ns"): (("cn", "rx_done_ns"), _int),
    ("cn", "host_path_ns"): (("cn", "host_path_ns"), _int),
    ("cn", "max_reads"): (("cn", "max_reads"), _int),
    ("cn", "max_writes"): (("cn", "max_writes"), _int),
    ("cn", "rto_ns"): (("cn", "rto_ns"), _int),
    ("cn", "local_read_ns"): (("cn", "local_read_ns"), _int),
    ("cn", "local_write_ns"): (("cn", "local_write_ns"), _int),

    ("cache", "enabled"): (("cn", "cache_enabled"), _bool),
    ("cache", "capacity_bytes"): (("cn", "cache", "capacity_bytes"), _int),
    ("cache", "ways"): (("cn", "cache", "ways"), _int),
    ("cache", "line_bytes"): (("cn", "cache", "line_bytes"), _int),
    ("cache", "read_hit_ns"): (("cn", "read_hit_ns"), _int),
    ("cache", "write_hit_ns"): (("cn", "write_hit_ns"), _int),

    ("cc", "enabled"): (("cn", "cc_enabled"), _bool),
    ("cc", "pfc_mode"): (("cn", "pfc_mode"), str.strip),
    ("cc", "initial_rate_gbps"): (("cn", "initial_rate_bps"), _opt_gbps),
    ("cc", "bucket_bytes"): (("cn", "bucket_bytes"), _int),
    ("cc", "t1_us"): (("cn", "cc", "t1"), _us),
    ("cc", "t2_us"): (("cn", "cc", "t2"), _us),
    ("cc", "t3_us"): (("cn", "cc", "t3"), _us),
    ("cc", "t4_us"): (("cn", "cc", "t4"), _us),
    ("cc", "t5_us"): (("cn", "cc", "t5"), _us),
    ("cc", "t6_us"): (("cn", "cc", "t6"), _us),
    ("cc", "increment_gbps"): (("cn", "cc", "increment"), _gbps),
    ("cc", "speedup_count_max"): (("cn", "cc", "speedup_count_max"), _int),
    ("cc", "line_rate_gbps"): (("cn", "cc", "line_rate"), _gbps),
    ("cc", "min_rate_gbps"): (("cn", "cc", "min_rate"), _gbps),

    ("link", "rate_gbps"): (("link", "rate_bps"), _gbps),
    ("link", "propagation_ns"): (("link", "propagation_ns"), _int),
    ("link", "processing_ns"): (("link", "processing_ns"), _int),

    ("faults", "drop_probability"): (("faults", "drop_probability"), float),
    ("faults", "corrupt_probability"): (("faults", "corrupt_probability"), float),
    ("faults", "trace_file"): (("faults", "trace"), lambda s: _read_trace(s.strip())),  # "none" for no trace
    ("faults", "pfc_faults"): (("faults", "pfc_faults"), _bool),

    ("mn", "mac"): (("mn", "mac"), str.strip),
    ("mn", "pool_bytes"): (("mn", "pool_bytes"), _int),
    ("mn", "page_bytes"): (("mn", "page_bytes"), _int),
    ("mn", "tlb_entries"): (("mn", "tlb_entries"), _int),
    ("mn", "page_table_buckets"): (("mn", "page_table_buckets"), _int),
    ("mn", "fifo_depth"): (("mn", "fifo_depth"), _int),
    ("mn", "pfc_threshold"): (("mn", "pfc_threshold"), _int),
    ("mn", "pfc_hysteresis"): (("mn", "pfc_hysteresis"), _int),
    ("mn", "pfc_min_gap_ns"): (("mn", "pfc_min_gap_ns"), _int),
    ("mn", "pfc_pause_quanta"): (("mn", "pfc_pause_quanta"), _int),
    ("mn", "ingest_ns"): (("mn", "ingest_ns"), _int),
    ("mn", "parse_ns"): (("mn", "parse_ns"), _int),
    ("mn", "resp_build_ns"): (("mn", "resp_build_ns"), _int),
    ("mn", "renak_ns"): (("mn", "renak_ns"), _int),
    ("mn", "verify_translation"): (("mn", "verify_translation"), _bool),

    ("dram", "banks"): (("mn", "dram", "banks"), _int),
    ("dram", "t_access_ns"): (("mn", "dram", "t_access_ns"), _int),
    ("dram", "stall_period_ns"): (("mn", "dram", "stall_period_ns"), _int),
    ("dram", "stall_duration_ns"): (("mn", "dram", "stall_duration_ns"), _int),
}


def _read_trace(path: str) -> tuple:
    if path.lower() in ("", "none"):
        return ()
    with open(path) as fh:
        return parse_loss_trace(fh)


def _set_path(obj, path: tuple[str, ...], value):
    """Functional update of a nested dataclass field."""
    head, *rest = path
    if not rest:
        return dataclasses.replace(obj, **{head: value})
    return dataclasses.replace(obj, **{head: _set_path(getattr(obj, head), tuple(rest), value)})


def apply(config: ScenarioConfig, dotted: str, raw: str, line: Optional[int] = None) -> ScenarioConfig:
    """Set ``section.key`` from its textual value."""
    section, _, key = dotted.partition(".")
    spec = KEYS.get((section, key))
    if spec is None:
        raise ConfigError("unknown key", dotted, line)
    path, parse = spec
    try:
        return _set_path(config, path, parse(raw))
    except ConfigError:
        raise
    except (ValueError, TypeError, OSError) as exc:
        raise ConfigError(str(exc), dotted, line) from None


def _line_of(text: str, section: str, key: str) -> Optional[int]:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].strip() == key:
            return n
    return None


def parse_config(text: str, base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], line=getattr(exc, "lineno", None)) from None
    config = base or ScenarioConfig()
    known_sections = {s for s, _ in KEYS}
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError("unknown section", section, _line_of_section(text, section))
        for key, value in parser.items(section):
            config = apply(config, f"{section}.{key}", value, _line_of(text, section, key))
    return config


def _line_of_section(text: str, section: str) -> Optional[int]:
    for n, line in enumerate(text.splitlines(), 1):
        if line.strip() == f"[{section}]":
            return n
    return None


def load_config(path: str) -> ScenarioConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def documented_keys() -> list[str]:
    return [f"{s}.{k}" for s, k in KEYS]


__all__ = ["ConfigError", "ScenarioConfig", "KEYS", "apply", "parse_config", "load_config",
           "documented_keys", "CacheConfig", "CcParams", "DramConfig", "LinkConfig",
           "FaultConfig", "MnConfig", "CnConfig", "WorkloadConfig"]
