import csv
import filecmp
import json
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cxloe.cache import Op
from cxloe.congctl import GBPS, Phase
from cxloe.harness import cli
from cxloe.harness.config import ConfigError, ScenarioConfig, documented_keys, load_config, parse_config
from cxloe.harness.experiments import configure
from cxloe.harness.oracle import verify, verify_result, verify_run_dir
from cxloe.harness.scenario import run_scenario, throughput_timeline, write_artifacts
from cxloe.harness.stable import stable_rates
from cxloe.harness import plot

ROOT = os.path.dirname(os.path.dirname(__file__))
DEFAULT_INI = os.path.join(ROOT, "configs", "default.ini")


# -- config ------------------------------------------------------------------------

def test_shipped_profile_equals_builtin_defaults():
    assert load_config(DEFAULT_INI) == ScenarioConfig()


def test_shipped_profile_lists_every_key():
    text = open(DEFAULT_INI).read()
    section = None
    found = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line.startswith("["):
            section = line.strip("[]")
        elif "=" in line:
            found.add(f"{section}.{line.split('=')[0].strip()}")
    assert found == set(documented_keys())


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("[cn]\nhost_path_ns = 1\nbogus = 2\n")
    assert exc.value.key == "cn.bogus" and exc.value.line == 3


def test_bad_value_is_a_config_error():
    with pytest.raises(ConfigError) as exc:
        parse_config("[cache]\nenabled = maybe\n")
    assert exc.value.key == "cache.enabled"
    with pytest.raises(ConfigError):
        parse_config("[workload]\nread_ratio = 2\n")


def test_units_in_config():
    cfg = parse_config("[cc]\nt1_us = 60\ninitial_rate_gbps = 40\n[run]\nduration_us = 3\n")
    assert cfg.cn.cc.t1 == 60_000
    assert cfg.cn.initial_rate_bps == 40 * GBPS
    assert cfg.duration_ns == 3000


# -- oracle -------------------------------------------------------------------------

def run_small(**kw):
    base = {"workload.request_count": 3000, "workload.footprint_bytes": 1 << 16}
    base.update(kw)
    return run_scenario(configure(base))


def test_clean_run_passes():
    res = run_small()
    assert res.oracle.passed and res.oracle.reads_checked > 0 and res.oracle.lines_checked > 0


def test_skipping_one_write_fails_at_that_address():
    res = run_small()
    last = {}
    for r in res.records:
        if r.op is Op.WRITE:
            last[r.addr] = r
    # the final write to an address whose value is never read back
    target = next(r for r in reversed(res.records) if r.op is Op.WRITE and last[r.addr] is r)
    verdict = verify_result(res, skip=target.req_id)
    assert not verdict.passed
    assert verdict.addr == target.addr


def test_cache_run_with_flush_passes():
    res = run_small(**{"cache.enabled": "true"})
    assert res.drained and res.oracle.passed


def test_stale_read_is_reported_first():
    ops = [(0, Op.WRITE, 0, b"\x01" * 64), (1, Op.READ, 0, b"\x02" * 64)]
    v = verify(ops, {0: b"\x01" * 64}, lambda a: a)
    assert (v.passed, v.req_id, v.addr) == (False, 1, 0)


def test_incomplete_write_may_or_may_not_land():
    ops = [(0, Op.WRITE, 0, b"\x01" * 64), (1, Op.WRITE, 0, b"\x02" * 64, False)]
    for pool_value in (b"\x01" * 64, b"\x02" * 64):
        assert verify(ops, {0: pool_value}, lambda a: a).passed


def test_run_dir_round_trip_and_tamper(tmp_path):
    res = run_small()
    write_artifacts(res, str(tmp_path))
    assert verify_run_dir(str(tmp_path)).passed
    rows = list(csv.reader(open(tmp_path / "ops.csv")))
    for row in rows[1:]:
        if row[1] == "R":
            row[3] = "ff" * 64
            break
    with open(tmp_path / "ops.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    assert not verify_run_dir(str(tmp_path)).passed


# -- stable-rate detection ---------------------------------------------------------------

def synthetic_trace(levels):
    """Piecewise-constant rate: (start_ns, gbps) steps."""
    return [(t, Phase.STABLE_RUNNING, g * GBPS, g * GBPS) for t, g in levels]


def test_first_and_final_stable_rates():
    trace = synthetic_trace([(0, 100), (10_000, 50), (60_000, 75), (71_000, 80), (300_000, 45),
                             (320_000, 46)])
    first, final = stable_rates(trace, 700_000, first_pfc_at=10_000)
    # earliest qualifying window starts at 60 us: 11 samples at 75 then 89 at 80,
    # std 1.56 < 2% of the mean
    assert first == pytest.approx((11 * 75 + 89 * 80) / 100)
    assert final == pytest.approx(46.0)


def test_no_stable_window():
    trace = synthetic_trace([(t, 50 + (t // 1000) % 2 * 10) for t in range(0, 200_000, 1000)])
    assert stable_rates(trace, 200_000) == (None, None)


@given(st.lists(st.tuples(st.integers(1_000, 80_000), st.integers(1, 100)), min_size=1, max_size=12),
       st.sampled_from([0.5, 2.0, 3.0, 10.0]))
def test_stable_rates_scale_with_the_trace(steps, k):
    t, levels = 0, []
    for dt, g in steps:
        levels.append((t, g))
        t += dt
    end = t + 150_000
    base = synthetic_trace(levels)
    scaled = [(t, ph, int(cr * k), int(tr * k)) for t, ph, cr, tr in base]
    a = stable_rates(base, end)
    b = stable_rates(scaled, end)
    assert (a[0] is None) == (b[0] is None) and (a[1] is None) == (b[1] is None)
    for x, y in zip(a, b):
        if x is not None:
            assert y == pytest.approx(x * k, rel=1e-9)


def test_throughput_timeline_bins():
    log = [(0, 125), (500, 125), (1500, 125)]
    assert throughput_timeline(log, 2000, 1000) == [(0, 2.0), (1000, 1.0), (2000, 0.0)]


# -- determinism -----------------------------------------------------------------------------

def test_same_config_and_seed_give_identical_csvs(tmp_path):
    cfg = configure({"workload.request_count": 3000, "faults.drop_probability": 0.01,
                     "cache.enabled": "true", "workload.footprint_bytes": 1 << 17})
    for name in ("a", "b"):
        write_artifacts(run_scenario(cfg), str(tmp_path / name))
    files = sorted(os.listdir(tmp_path / "a"))
    assert "latency.csv" in files and "ops.csv" in files
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert mismatch == [] and errors == []


def test_different_seed_changes_the_run():
    a = run_small()
    b = run_scenario(configure({"workload.request_count": 3000, "workload.footprint_bytes": 1 << 16,
                                "run.seed": 2}))
    assert [r.addr for r in a.records] != [r.addr for r in b.records]


# -- CLI ----------------------------------------------------------------------------------------

def small_ini(tmp_path, extra=""):
    p = tmp_path / "small.ini"
    p.write_text("[workload]\nrequest_count = 500\n" + extra)
    return str(p)


def test_cli_run_and_verify(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["run", small_ini(tmp_path), "--seed", "4", "--csv-dir", str(out),
                     "--trace", str(tmp_path / "trace.tsv")]) == cli.EXIT_OK
    report = json.load(open(out / "report.json"))
    assert report["seed"] == 4 and report["oracle"]["passed"]
    first = open(tmp_path / "trace.tsv").readline().rstrip("\n").split("\t")
    assert len(first) == 3
    assert cli.main(["verify", str(out)]) == cli.EXIT_OK


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[link]\nspeed = 3\n")
    assert cli.main(["run", str(bad), "--csv-dir", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert cli.main(["sweep", small_ini(tmp_path), "--vary", "nope.key=1"]) == cli.EXIT_CONFIG


def test_cli_oracle_failure_exit_code(tmp_path):
    out = tmp_path / "run"
    cli.main(["run", small_ini(tmp_path), "--csv-dir", str(out)])
    raw = bytearray(open(out / "pool.bin", "rb").read())
    raw[8] ^= 0xFF  # corrupt the first stored line
    open(out / "pool.bin", "wb").write(bytes(raw))
    assert cli.main(["verify", str(out)]) == cli.EXIT_ORACLE


def test_cli_sweep_writes_summary(tmp_path):
    root = tmp_path / "sweep"
    rc = cli.main(["sweep", small_ini(tmp_path), "--vary", "workload.read_ratio=0,1",
                   "--vary", "cache.enabled=false,true", "--csv-dir", str(root)])
    assert rc == cli.EXIT_OK
    rows = list(csv.DictReader(open(root / "sweep.csv")))
    assert len(rows) == 4 and all(r["oracle_passed"] == "1" for r in rows)


# -- plots ----------------------------------------------------------------------------------------

def test_plots_are_standalone_svg(tmp_path):
    plot.stacked_bars(str(tmp_path / "b.svg"), ["1", "2"], {"a": [1, 2], "b": [3, 4]}, "t")
    plot.lines(str(tmp_path / "l.svg"), {"x": [(0, 1), (1, 2)], "empty": []}, "t")
    for name in ("b.svg", "l.svg"):
        text = open(tmp_path / name).read()
        assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
