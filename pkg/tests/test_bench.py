import csv
import io

from quicknat.bench import (CSV_HEADER, BenchReport, bench_lookup, bench_pktsize,
                            bench_scale, gen_lookup_rules, gen_probes, throughput_rules)
from quicknat.packet import ip_to_int
from quicknat.rules import SNAT, LinearRuleList, SubtableSet


def test_csv_header_is_fixed():
    assert CSV_HEADER == ["bench", "param", "impl", "mean_ns", "p99_ns", "pps", "bps",
                          "repetitions", "seed"]
    r = BenchReport()
    r.add(bench="x", param=1, mean_ns=1.5e3)
    head, row = r.to_csv().splitlines()
    assert head == ",".join(CSV_HEADER)
    assert row.split(",")[3] == "1500.0"   # raw repr, no locale grouping


def test_lookup_rules_deterministic_and_disjoint():
    a, b = gen_lookup_rules(500, 4), gen_lookup_rules(500, 4)
    assert a == b
    blocks = {r.prefix >> 8 for r in a}
    assert len(blocks) == 500
    for r in a:
        assert r.mask_len in (24, 28, 32) and r.direction is SNAT
        assert ip_to_int("11.0.0.0") <= r.prefix < ip_to_int("192.0.0.0")


def test_probes_half_hit_and_agree():
    rules = gen_lookup_rules(300, 2)
    probes = gen_probes(rules, 2000, 2)
    qns, lin = SubtableSet(rules), LinearRuleList(rules)
    hits = [qns.lookup(SNAT, t) for t in probes]
    assert hits == [lin.lookup(SNAT, t) for t in probes]
    assert all(h is not None for h in hits[0::2])
    assert all(h is None for h in hits[1::2])


def test_zero_rules_answer_none_without_probes():
    t = SubtableSet(gen_lookup_rules(0, 1))
    assert t.lookup(SNAT, gen_probes([], 1, 1)[0]) is None and t.probes == 0
    rows = bench_lookup([0], probes=300).rows
    assert [r["impl"] for r in rows] == ["qns", "linear"]


def test_bench_lookup_rows():
    rep = bench_lookup([10, 100], probes=2000, seed=5)
    assert [(r["param"], r["impl"]) for r in rep.rows] == [
        (10, "qns"), (10, "linear"), (100, "qns"), (100, "linear")]
    for r in rep.rows:
        assert 0 < r["mean_ns"] <= r["p99_ns"] * 10 and r["seed"] == 5


def test_throughput_rules_cover_workload_once():
    rules = throughput_rules()
    assert len(rules) == 1000
    src = ip_to_int("192.168.4.4")
    matching = [r for r in rules if (src & ((0xFFFFFFFF << (32 - r.mask_len)) & 0xFFFFFFFF)) == r.prefix]
    assert matching == [rules[-1]]


def test_scale_reports_baseline():
    rep = bench_scale([1], flows=300, duration=0.0)
    (row,) = rep.rows
    assert row["param"] == 1 and row["pps"] > 0 and row["repetitions"] == 1


def test_pktsize_single_row_and_bits_arithmetic():
    rep = bench_pktsize([64], workers=1, flows=200, duration=0.0)
    assert len(rep.rows) == 1
    rep = bench_pktsize([64, 256, 1500], workers=1, flows=200, duration=0.0)
    for r in rep.rows:
        assert r["bps"] == r["pps"] * r["param"] * 8
    ceiling = max(r["pps"] for r in rep.rows)
    bits_at_ceiling = [ceiling * r["param"] * 8 for r in rep.rows]
    assert bits_at_ceiling == sorted(bits_at_ceiling) and len(set(bits_at_ceiling)) == 3
    out = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert [o["param"] for o in out] == ["64", "256", "1500"]
