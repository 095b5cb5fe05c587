"""Receive-side scaling: Toeplitz hash, indirection table and flow spread."""

import numpy as np

from quicknat.packet import FiveTuple
from quicknat.rss import DEFAULT_KEY, RssConfig, toeplitz_hash, tuple_layout
from quicknat.traffic import FlowSpec, gen_tuples

t = FiveTuple.of(("66.9.149.187", 2794), ("161.142.100.80", 1766))
print("verification vector:", hex(toeplitz_hash(DEFAULT_KEY, tuple_layout(t))))  # 0x51ccc178

rss = RssConfig(nworkers=4)
tuples = gen_tuples(FlowSpec(flows=8000))
cores = np.array([rss.core_for_tuple(x) for x in tuples])
print("flows per worker:", np.bincount(cores, minlength=4))

# the reply of a translated flow is steered by its own hash, often elsewhere
translated = [x._replace(src_ip=0x65C80101) for x in tuples[:1000]]
moved = np.mean([rss.core_for_tuple(x.reverse()) != rss.core_for_tuple(x) for x in translated])
print(f"replies landing on another worker: {moved:.0%}")
