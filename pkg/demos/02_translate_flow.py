"""One flow through SNAT: allocation, in-place rewrite, conntrack, and the reply."""

from quicknat.conntrack import LocalConnTable, make_entry_pair
from quicknat.packet import (FiveTuple, build_packet, checksums_valid, int_to_ip,
                             parse_packet, rewrite_tuple)
from quicknat.pool import PoolState
from quicknat.rules import SNAT, TargetPool

flow = FiveTuple.of(("192.168.88.32", 1234), ("103.235.46.39", 80))
buf = build_packet(flow, 64, b"hello")
view = parse_packet(buf)
print("parsed:", view.tuple, "l4 at", view.l4_offset)

pool = PoolState(TargetPool.of("101.200.1.1", (1000, 2000)))
new_src = pool.allocate(flow, SNAT)
print("allocated:", int_to_ip(new_src[0]), new_src[1])  # port 1234 is in range and free, so it is kept

rewrite_tuple(buf, view, new_src=new_src)
print("rewritten:", parse_packet(buf).tuple, "checksums ok:", checksums_valid(buf))

# both directions are recorded when the flow is created
table = LocalConnTable()
fwd, rev = make_entry_pair(flow, new_src, None, lambda t: 0, now=0.0)
table.insert(fwd)
table.insert(rev)
print("reply entry matches:", rev.match_tuple)

reply = build_packet(parse_packet(buf).tuple.reverse(), 64)
entry = table.lookup(parse_packet(reply).tuple, now=1.0)
rewrite_tuple(reply, parse_packet(reply), entry.new_src, entry.new_dst)
print("reply delivered as:", parse_packet(reply).tuple)
assert parse_packet(reply).tuple == flow.reverse()

# a second flow to the same peer cannot reuse the pair
other = flow._replace(src_ip=flow.src_ip + 1)
ip, port = pool.allocate(other, SNAT)
print("second flow gets:", int_to_ip(ip), port)
