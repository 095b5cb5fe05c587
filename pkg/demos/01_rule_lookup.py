"""Rule lookup: mask-partitioned hash subtables against a sequential scan."""

import time

import numpy as np

from quicknat.bench import gen_lookup_rules, gen_probes
from quicknat.packet import FiveTuple
from quicknat.rules import (SNAT, LinearRuleList, NatRule, SubtableSet, TargetPool,
                            bucket_hash, mask_ip)

pool = TargetPool.of("101.200.1.1", (1000, 2000))
rules = [
    NatRule.make(SNAT, "192.168.88.31", 32, 1234, 6, pool, rule_id=0),
    NatRule.make(SNAT, "192.168.88.0", 24, None, 6, pool, rule_id=1),
    NatRule.make(SNAT, "192.168.0.0", 16, None, 0, pool, rule_id=2),
]
tables = SubtableSet(rules)

# one flag bit per non-empty subtable
print("SNAT flags:", [m for m in range(33) if tables.flag(SNAT, m)])

flow = FiveTuple.of(("192.168.88.32", 1234), ("103.235.46.39", 80))
masked = mask_ip(flow.src_ip, 24)
print("bucket of the /24 wildcard key:", hex(bucket_hash(masked, None, flow.proto)))

hit = tables.lookup(SNAT, flow)
print("matched:", hit, "after", tables.probes, "bucket probes")  # /32 missed twice, /24 hit

# the same answer from the sequential scan
print("linear agrees:", LinearRuleList(rules).lookup(SNAT, flow) is hit)

# lookup cost as the rule set grows
for n in (100, 1000, 10000):
    rs = gen_lookup_rules(n, seed=1)
    probes = gen_probes(rs, 2000, seed=1)
    q, lin = SubtableSet(rs), LinearRuleList(rs)
    times = []
    for impl in (q, lin):
        t0 = time.perf_counter()
        for t in probes[:500]:
            impl.lookup(SNAT, t)
        times.append((time.perf_counter() - t0) / 500 * 1e9)
    print(f"{n:6d} rules: qns {times[0]:8.0f} ns   linear {times[1]:10.0f} ns   "
          f"ratio {np.divide(*times[::-1]):6.1f}x")
