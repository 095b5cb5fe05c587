"""
Benchmarks: rule lookup latency versus rule count, throughput versus worker
count, and throughput versus frame length.

Workloads are deterministic under the seed; timings are not.  Results are
meant to be read as shapes and ratios, not absolute numbers.
"""

import csv
import io
import random
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .engine import default_executor, run_engine
from .packet import TCP, UDP, FiveTuple
from .rss import RssConfig
from .rules import ANY, SNAT, LinearRuleList, NatRule, SubtableSet, TargetPool
from .traffic import FlowSpec, gen_flows

CSV_HEADER = ["bench", "param", "impl", "mean_ns", "p99_ns", "pps", "bps",
              "repetitions", "seed"]

RULE_COUNTS = (100, 1000, 3000, 5000, 10000)
PACKET_LENGTHS = (64, 128, 256, 512, 800, 1500)

# rule prefixes lie in 11.0.0.0-191.255.255.255; 10.0.0.0/8 is kept for misses
_RULE_SPACE_LO = 11 << 24
_RULE_SPACE_BLOCKS = (192 << 16) - (11 << 16)
_MISS_NET = 10 << 24
_LOOKUP_MASKS = (24, 28, 32)
_LOOKUP_POOL = TargetPool.of("101.200.1.1", (1024, 65535))


@dataclass
class BenchReport:
    rows: List[Dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append({k: row.get(k, "") for k in CSV_HEADER})

    def select(self, bench=None, impl=None) -> List[Dict]:
        return [r for r in self.rows
                if (bench is None or r["bench"] == bench)
                and (impl is None or r["impl"] == impl)]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.DictWriter(out, fieldnames=CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _raw(v) for k, v in row.items()})
        return out.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())


def _raw(v):
    if isinstance(v, float):
        return repr(v)
    return v


# -- lookup latency --------------------------------------------------------------

def gen_lookup_rules(n: int, seed: int) -> List[NatRule]:
    """``n`` SNAT rules no two of which can match the same packet.

    Each rule gets its own /24 block; within it the prefix is a /24, /28 or
    /32 and the port is exact or wildcard.
    """
    rng = random.Random(seed)
    blocks = rng.sample(range(_RULE_SPACE_BLOCKS), n)
    rules = []
    for i, b in enumerate(blocks):
        base = _RULE_SPACE_LO + (b << 8)
        mask = rng.choice(_LOOKUP_MASKS)
        port = rng.randint(1024, 65535) if rng.random() < 0.5 else None
        proto = rng.choice((TCP, UDP, ANY))
        rules.append(NatRule.make(SNAT, base + rng.randrange(256), mask, port,
                                  proto, _LOOKUP_POOL, rule_id=i))
    return rules


def gen_probes(rules: Sequence[NatRule], count: int, seed: int) -> List[FiveTuple]:
    """Half the probes hit a random rule, half miss every rule."""
    rng = random.Random(seed + 1)
    probes = []
    for i in range(count):
        dst = rng.getrandbits(32)
        dport = rng.randint(1, 65535)
        if i % 2 == 0 and rules:
            r = rng.choice(rules)
            host = rng.getrandbits(32 - r.mask_len) if r.mask_len < 32 else 0
            sport = r.port if r.port is not None else rng.randint(1024, 65535)
            proto = r.proto if r.proto != ANY else rng.choice((TCP, UDP))
            probes.append(FiveTuple(r.prefix | host, dst, sport, dport, proto))
        else:
            probes.append(FiveTuple(_MISS_NET | rng.getrandbits(24), dst,
                                    rng.randint(1024, 65535), dport,
                                    rng.choice((TCP, UDP))))
    return probes


def time_lookups(lookup, probes, warmup: int = 1000) -> np.ndarray:
    """Per-call latency in ns of ``lookup(SNAT, probe)`` over ``probes``."""
    for t in probes[:warmup]:
        lookup(SNAT, t)
    samples = np.empty(len(probes), dtype=np.int64)
    clock = time.perf_counter_ns
    for i, t in enumerate(probes):
        t0 = clock()
        lookup(SNAT, t)
        samples[i] = clock() - t0
    return samples


def bench_lookup(rule_counts: Sequence[int] = RULE_COUNTS, probes: int = 100_000,
                 seed: int = 1, linear_budget: int = 2_000_000) -> BenchReport:
    """QNS versus sequential-scan lookup latency per rule count.

    The scan gets ``linear_budget // n`` probes (at least 200) so the largest
    tables do not dominate the run time.
    """
    report = BenchReport()
    for n in rule_counts:
        rules = gen_lookup_rules(n, seed)
        tuples = gen_probes(rules, probes, seed)
        qns = SubtableSet(rules)
        s = time_lookups(qns.lookup, tuples)
        report.add(bench="lookup", param=n, impl="qns", mean_ns=float(s.mean()),
                   p99_ns=float(np.percentile(s, 99)), repetitions=len(s), seed=seed)
        linear = LinearRuleList(rules)
        k = max(200, min(probes, linear_budget // max(n, 1)))
        s = time_lookups(linear.lookup, tuples[:k], warmup=min(k, 50))
        report.add(bench="lookup", param=n, impl="linear", mean_ns=float(s.mean()),
                   p99_ns=float(np.percentile(s, 99)), repetitions=len(s), seed=seed)
    return report


# -- throughput ------------------------------------------------------------------

THROUGHPUT_POOL = TargetPool.of("101.200.1.0", (1024, 65535), ip_hi="101.200.1.255")


def throughput_rules(total: int = 1000, seed: int = 1) -> List[NatRule]:
    """One SNAT rule covering the synthetic sources plus non-matching filler."""
    rules = gen_lookup_rules(total - 1, seed)
    rules.append(NatRule.make(SNAT, "192.168.0.0", 16, None, ANY, THROUGHPUT_POOL,
                              rule_id=total - 1))
    return rules


def _measure(nworkers: int, frames, rules, duration: float, executor: str):
    best = None
    reps = 0
    spent = 0.0
    while reps == 0 or spent < duration:
        source = [(ts, bytearray(b)) for ts, b in frames]
        report = run_engine(nworkers, RssConfig(nworkers=nworkers), rules, source,
                            executor=executor, prefill=True)
        reps += 1
        spent += report.wall_time
        if best is None or report.pps > best.pps:
            best = report
    return best, reps


def bench_scale(worker_counts: Sequence[int] = (1, 2, 4), flows: int = 8000,
                pktlen: int = 64, duration: float = 2.0, seed: int = 1,
                pkts_per_flow: int = 4, executor: Optional[str] = None) -> BenchReport:
    """Best-of packets/s per worker count over the synthetic workload."""
    rules = throughput_rules(seed=seed)
    spec = FlowSpec(flows=flows, length=pktlen, pkts_per_flow=pkts_per_flow, seed=seed)
    frames = list(gen_flows(spec))
    report = BenchReport()
    for n in worker_counts:
        ex = executor or default_executor(n)
        best, reps = _measure(n, frames, rules, duration, ex)
        report.add(bench="scale", param=n, impl=ex, pps=best.pps, bps=best.bps,
                   repetitions=reps, seed=seed)
    return report


def bench_pktsize(lengths: Sequence[int] = PACKET_LENGTHS, workers: int = 1,
                  flows: int = 8000, duration: float = 2.0, seed: int = 1,
                  pkts_per_flow: int = 4, executor: Optional[str] = None) -> BenchReport:
    """Best-of packets/s and bits/s per frame length."""
    rules = throughput_rules(seed=seed)
    ex = executor or default_executor(workers)
    report = BenchReport()
    for length in lengths:
        if length < 64:
            raise ValueError("frame lengths below 64 bytes are not Ethernet-valid")
        spec = FlowSpec(flows=flows, length=length, pkts_per_flow=pkts_per_flow, seed=seed)
        frames = list(gen_flows(spec))
        best, reps = _measure(workers, frames, rules, duration, ex)
        report.add(bench="pktsize", param=length, impl=ex, pps=best.pps,
                   bps=best.pps * length * 8, repetitions=reps, seed=seed)
    return report
