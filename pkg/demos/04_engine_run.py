"""The full dataplane: 8000 flows over four workers, replies, and expiry."""

import tempfile
from pathlib import Path

from quicknat.config import parse_rules_text
from quicknat.engine import Engine
from quicknat.packet import build_packet, parse_packet
from quicknat.traffic import FlowSpec, gen_flows, gen_tuples, pcap_read, pcap_write

rules = parse_rules_text("""
snat 192.168.0.0/16 any * -> 101.200.1.0-101.200.1.255:1024-65535
dnat 100.64.0.0/12 tcp * -> 10.1.0.0-10.1.0.255:8000-8999
""")
spec = FlowSpec(flows=8000, length=64, pkts_per_flow=2)
tuples = gen_tuples(spec)

engine = Engine(rules, nworkers=4, idle_timeout=30)
out = []
report = engine.run(gen_flows(spec, tuples), sink=lambda ts, b: out.append((ts, b)))
print(report.summary())
print("per worker rx:", [c.rx for c in report.per_worker])
print("connection entries:", engine.conn_entries())

tmp = Path(tempfile.mkdtemp())
pcap_write(tmp / "forward.pcap", out)
forward = [parse_packet(b).tuple for _, b in pcap_read(tmp / "forward.pcap")]
print("first rewrite:", tuples[0], "=>", forward[0])

# answer every flow once
replies = [(ts, build_packet(t.reverse())) for ts, t in enumerate(forward[:8000])]
back = []
engine.run(replies, sink=lambda ts, b: back.append(parse_packet(b).tuple))
print("replies restored:", sum(b == t.reverse() for b, t in zip(back, tuples)), "/ 8000")

# idle past the timeout: every entry and pool pair is returned
engine.expire(now=1e6)
print("after expiry:", engine.conn_entries(), "entries,", engine.live_allocations(), "pairs")
