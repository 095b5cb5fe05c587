"""Scaled-down runs of the three benchmark suites (the CLI runs the full ones)."""

import os

from quicknat.bench import bench_lookup, bench_pktsize, bench_scale

print(bench_lookup([100, 1000, 10000], probes=5000).to_csv())

workers = [1, 2, 4] if (os.cpu_count() or 1) >= 4 else [1, 2]
print(bench_scale(workers, flows=2000, duration=0.5).to_csv())

print(bench_pktsize([64, 512, 1500], flows=2000, duration=0.5).to_csv())
