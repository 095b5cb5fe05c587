import struct

import pytest
from hypothesis import given, settings, strategies as st

from conftest import FLOW, word_sum_checksum
from quicknat.packet import (TCP, UDP, BadIpHeaderLen, FiveTuple, Fragmented,
                             NotIPv4, Truncated, UnsupportedProto, build_packet,
                             checksums_valid, ip_to_int, parse_packet,
                             pseudo_header, rewrite_tuple)


def hand_frame(ihl_words=5, proto=TCP, src=FLOW.src_ip, dst=FLOW.dst_ip,
               sport=1234, dport=80, pad=64):
    """Frame assembled field by field, independent of build_packet."""
    eth = bytes(6) + bytes(6) + b"\x08\x00"
    opts = b"\x01" * (ihl_words * 4 - 20)
    l4 = struct.pack("!HH", sport, dport) + bytes(16 if proto == TCP else 4)
    total = ihl_words * 4 + len(l4)
    ip = struct.pack("!BBHHHBBH4s4s", 0x40 | ihl_words, 0, total, 0, 0, 64, proto, 0,
                     src.to_bytes(4, "big"), dst.to_bytes(4, "big")) + opts
    frame = eth + ip + l4
    return bytearray(frame + bytes(max(0, pad - len(frame))))


def test_parse_example_flow():
    buf = build_packet(FLOW, 64)
    v = parse_packet(buf)
    assert (v.l3_offset, v.l4_offset, v.proto) == (14, 34, 6)
    assert v.tuple == FLOW
    assert len(buf) == 64


def test_parse_hand_built_matches_builder():
    v = parse_packet(hand_frame())
    assert v.tuple == FLOW and v.l4_offset == 34


def test_parse_ip_options_shift_l4():
    buf = hand_frame(ihl_words=6)
    # hex-dump check: the byte at 14 is the version/IHL octet 0x46
    assert buf[14] == 0x46
    v = parse_packet(buf)
    assert v.l4_offset == 38 and v.ip_header_len == 24
    assert v.tuple.src_port == 1234


def test_arp_rejected():
    buf = hand_frame()
    buf[12:14] = b"\x08\x06"
    with pytest.raises(NotIPv4):
        parse_packet(buf)


@pytest.mark.parametrize("mutate, exc", [
    (lambda b: b.__setitem__(23, 1), UnsupportedProto),          # ICMP
    (lambda b: b.__setitem__(14, 0x44), BadIpHeaderLen),         # IHL 4
    (lambda b: b.__setitem__(20, 0x20), Fragmented),             # MF set
    (lambda b: b.__setitem__(14, 0x65), NotIPv4),                # version 6
])
def test_parse_rejections(mutate, exc):
    buf = hand_frame()
    mutate(buf)
    with pytest.raises(exc):
        parse_packet(buf)


def test_truncated():
    with pytest.raises(Truncated):
        parse_packet(hand_frame(pad=0)[:40])
    with pytest.raises(Truncated):
        parse_packet(bytearray(10))


def test_builder_checksums_match_reference():
    for proto in (TCP, UDP):
        t = FLOW._replace(proto=proto)
        buf = build_packet(t, 100, b"abc")
        assert word_sum_checksum(bytes(buf[14:34])) == 0
        seg = bytes(buf[34:])
        ph = pseudo_header(t.src_ip, t.dst_ip, proto, len(seg))
        assert word_sum_checksum(ph + seg) == 0
        assert checksums_valid(buf)


def test_rewrite_src_example():
    buf = build_packet(FLOW, 64)
    new_ip = ip_to_int("101.200.1.1")
    rewrite_tuple(buf, parse_packet(buf), new_src=(new_ip, 5000))
    assert buf[26:30] == new_ip.to_bytes(4, "big")
    assert buf[34:36] == (5000).to_bytes(2, "big")
    assert buf[30:34] == FLOW.dst_ip.to_bytes(4, "big")
    # stored checksums equal a full recompute with the checksum field zeroed
    ip = bytearray(buf[14:34])
    stored = int.from_bytes(ip[10:12], "big")
    ip[10:12] = b"\0\0"
    assert word_sum_checksum(bytes(ip)) == stored
    seg = bytearray(buf[34:])
    stored = int.from_bytes(seg[16:18], "big")
    seg[16:18] = b"\0\0"
    ph = pseudo_header(new_ip, FLOW.dst_ip, TCP, len(seg))
    assert word_sum_checksum(ph + bytes(seg)) == stored


def test_rewrite_identity_is_byte_identical():
    buf = build_packet(FLOW, 64, b"xyz")
    before = bytes(buf)
    rewrite_tuple(buf, parse_packet(buf))
    assert bytes(buf) == before
    rewrite_tuple(buf, parse_packet(buf), new_src=(FLOW.src_ip, FLOW.src_port),
                  new_dst=(FLOW.dst_ip, FLOW.dst_port))
    assert bytes(buf) == before


def test_rewrite_keeps_disabled_udp_checksum():
    t = FLOW._replace(proto=UDP)
    buf = build_packet(t, 64, udp_checksum=False)
    assert buf[40:42] == b"\0\0"
    rewrite_tuple(buf, parse_packet(buf), new_src=(ip_to_int("101.200.1.1"), 5000))
    assert buf[40:42] == b"\0\0"
    assert checksums_valid(buf)


def test_rewrite_in_place_returns_same_object():
    buf = build_packet(FLOW, 64)
    ident = id(buf)
    rewrite_tuple(buf, parse_packet(buf), new_dst=(1, 2))
    assert id(buf) == ident and parse_packet(buf).tuple.dst_ip == 1


ports = st.integers(0, 0xFFFF)
ips = st.integers(0, 0xFFFFFFFF)
endpoints = st.none() | st.tuples(ips, ports)


@settings(max_examples=300, deadline=None)
@given(src=ips, dst=ips, sp=ports, dp=ports, proto=st.sampled_from([TCP, UDP]),
       length=st.integers(64, 200), payload=st.binary(max_size=40),
       opts=st.sampled_from([b"", b"\x01" * 4, b"\x01" * 8]),
       new_src=endpoints, new_dst=endpoints)
def test_rewrite_preserves_valid_checksums(src, dst, sp, dp, proto, length, payload,
                                           opts, new_src, new_dst):
    t = FiveTuple(src, dst, sp, dp, proto)
    buf = build_packet(t, length, payload, ip_options=opts)
    rewrite_tuple(buf, parse_packet(buf), new_src, new_dst)
    assert parse_packet(buf).tuple == t.rewritten(new_src, new_dst)
    assert checksums_valid(buf)


@settings(max_examples=100, deadline=None)
@given(proto=st.sampled_from([TCP, UDP]), payload=st.binary(min_size=1, max_size=64),
       new_src=endpoints, new_dst=endpoints)
def test_rewrite_touches_no_payload_and_copies_nothing(proto, payload, new_src, new_dst):
    from quicknat.packet import copy_count
    buf = build_packet(FLOW._replace(proto=proto), 150, payload)
    view = parse_packet(buf)
    body_at = view.l4_offset + (20 if proto == TCP else 8)
    body = bytes(buf[body_at:])
    before = copy_count()
    rewrite_tuple(buf, view, new_src, new_dst)
    assert copy_count() == before
    assert bytes(buf[body_at:]) == body and len(buf) == 150
