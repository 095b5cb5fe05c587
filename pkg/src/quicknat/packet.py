"""
Ethernet/IPv4/TCP/UDP header parsing and in-place five-tuple rewriting.

A packet is a ``bytearray`` holding one Ethernet frame.  Parsing never
modifies the buffer; rewriting mutates only the address, port and checksum
fields, in place.
"""

import ipaddress
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

ETH_HLEN = 14
ETHERTYPE_IPV4 = 0x0800
TCP = 6
UDP = 17

_U16 = struct.Struct("!H")
_U32 = struct.Struct("!I")
_IPV4_FIXED = struct.Struct("!BBHHHBBH4s4s")

Endpoint = Tuple[int, int]

# Incremented by clone_packet(), the only sanctioned way to duplicate a buffer.
_copies = 0


class ParseError(ValueError):
    """A frame the dataplane does not accept."""


class NotIPv4(ParseError):
    pass


class UnsupportedProto(ParseError):
    pass


class Truncated(ParseError):
    pass


class BadIpHeaderLen(ParseError):
    pass


class Fragmented(ParseError):
    pass


def ip_to_int(addr) -> int:
    if isinstance(addr, int):
        return addr
    return int(ipaddress.IPv4Address(addr))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


class FiveTuple(NamedTuple):
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    proto: int

    @classmethod
    def of(cls, src, dst, proto=TCP):
        """Build from ``("a.b.c.d", port)`` pairs, e.g. in tests."""
        return cls(ip_to_int(src[0]), ip_to_int(dst[0]), src[1], dst[1], proto)

    def reverse(self) -> "FiveTuple":
        return FiveTuple(self.dst_ip, self.src_ip, self.dst_port,
                         self.src_port, self.proto)

    def rewritten(self, new_src: Optional[Endpoint],
                  new_dst: Optional[Endpoint]) -> "FiveTuple":
        src_ip, src_port = new_src if new_src is not None else (self.src_ip, self.src_port)
        dst_ip, dst_port = new_dst if new_dst is not None else (self.dst_ip, self.dst_port)
        return FiveTuple(src_ip, dst_ip, src_port, dst_port, self.proto)

    def __str__(self):
        name = {TCP: "tcp", UDP: "udp"}.get(self.proto, str(self.proto))
        return (f"{name} {int_to_ip(self.src_ip)}:{self.src_port} -> "
                f"{int_to_ip(self.dst_ip)}:{self.dst_port}")


@dataclass(frozen=True)
class HeaderView:
    l3_offset: int
    l4_offset: int
    ip_header_len: int
    tuple: FiveTuple

    @property
    def proto(self) -> int:
        return self.tuple.proto

    @property
    def l4_checksum_offset(self) -> int:
        return self.l4_offset + (16 if self.tuple.proto == TCP else 6)


def copy_count() -> int:
    """Number of packet buffer duplications performed so far in this process."""
    return _copies


def clone_packet(buf) -> bytearray:
    global _copies
    _copies += 1
    return bytearray(buf)


# -- checksums ---------------------------------------------------------------

def ones_complement_sum(data, initial: int = 0) -> int:
    """Folded 16-bit ones-complement sum of ``data`` (odd length zero-padded)."""
    total = initial
    n = len(data)
    for i in range(0, n - 1, 2):
        total += (data[i] << 8) | data[i + 1]
    if n % 2:
        total += data[n - 1] << 8
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def full_checksum(data, pseudo_header=None) -> int:
    """Internet checksum over ``data``, optionally preceded by a pseudo-header."""
    total = ones_complement_sum(pseudo_header) if pseudo_header else 0
    return ~ones_complement_sum(data, total) & 0xFFFF


def pseudo_header(src_ip: int, dst_ip: int, proto: int, l4_length: int) -> bytes:
    return struct.pack("!IIBBH", src_ip, dst_ip, 0, proto, l4_length)


def incremental_checksum(old_csum: int, old_field: int, new_field: int) -> int:
    """Update a checksum after one 16-bit word changes.

    Uses HC' = ~(~HC + ~m + m'), which never produces the +0/-0 confusion of
    the subtraction form.
    """
    if old_field == new_field:
        return old_csum
    total = (~old_csum & 0xFFFF) + (~old_field & 0xFFFF) + new_field
    total = (total & 0xFFFF) + (total >> 16)
    total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _update32(csum: int, old: int, new: int) -> int:
    csum = incremental_checksum(csum, old >> 16, new >> 16)
    return incremental_checksum(csum, old & 0xFFFF, new & 0xFFFF)


# -- parse / rewrite ---------------------------------------------------------

def parse_packet(buf) -> HeaderView:
    """Locate the IPv4 and transport headers and extract the five-tuple."""
    n = len(buf)
    if n < ETH_HLEN:
        raise Truncated(f"frame of {n} bytes has no Ethernet header")
    ethertype = (buf[12] << 8) | buf[13]
    if ethertype != ETHERTYPE_IPV4:
        raise NotIPv4(f"ethertype 0x{ethertype:04x}")
    l3 = ETH_HLEN
    if n < l3 + 20:
        raise Truncated("IPv4 header truncated")
    vihl = buf[l3]
    if vihl >> 4 != 4:
        raise NotIPv4(f"IP version {vihl >> 4}")
    ihl = (vihl & 0x0F) * 4
    if ihl < 20:
        raise BadIpHeaderLen(f"IHL {ihl // 4}")
    proto = buf[l3 + 9]
    if proto == TCP:
        l4_len = 20
    elif proto == UDP:
        l4_len = 8
    else:
        raise UnsupportedProto(f"IP protocol {proto}")
    if n < l3 + ihl + l4_len:
        raise Truncated(f"need {l3 + ihl + l4_len} bytes, have {n}")
    frag = (buf[l3 + 6] << 8) | buf[l3 + 7]
    if frag & 0x3FFF:
        raise Fragmented("IP fragment")
    l4 = l3 + ihl
    src_ip, dst_ip = struct.unpack_from("!II", buf, l3 + 12)
    src_port, dst_port = struct.unpack_from("!HH", buf, l4)
    return HeaderView(l3, l4, ihl, FiveTuple(src_ip, dst_ip, src_port, dst_port, proto))


def rewrite_tuple(buf, view: HeaderView, new_src: Optional[Endpoint] = None,
                  new_dst: Optional[Endpoint] = None) -> None:
    """Overwrite source and/or destination endpoints of ``buf`` in place.

    ``None`` keeps the corresponding endpoint.  The IPv4 header checksum and
    the TCP/UDP checksum are patched incrementally; a zero UDP checksum
    (checksum disabled) stays zero.
    """
    l3 = view.l3_offset
    l4 = view.l4_offset
    tup = view.tuple
    ip_csum_at = l3 + 10
    l4_csum_at = view.l4_checksum_offset
    ip_csum = (buf[ip_csum_at] << 8) | buf[ip_csum_at + 1]
    l4_csum = (buf[l4_csum_at] << 8) | buf[l4_csum_at + 1]
    udp_off = tup.proto == UDP and l4_csum == 0

    if new_src is not None:
        ip, port = new_src
        if ip != tup.src_ip:
            _U32.pack_into(buf, l3 + 12, ip)
            ip_csum = _update32(ip_csum, tup.src_ip, ip)
            l4_csum = _update32(l4_csum, tup.src_ip, ip)
        if port != tup.src_port:
            _U16.pack_into(buf, l4, port)
            l4_csum = incremental_checksum(l4_csum, tup.src_port, port)
    if new_dst is not None:
        ip, port = new_dst
        if ip != tup.dst_ip:
            _U32.pack_into(buf, l3 + 16, ip)
            ip_csum = _update32(ip_csum, tup.dst_ip, ip)
            l4_csum = _update32(l4_csum, tup.dst_ip, ip)
        if port != tup.dst_port:
            _U16.pack_into(buf, l4 + 2, port)
            l4_csum = incremental_checksum(l4_csum, tup.dst_port, port)

    _U16.pack_into(buf, ip_csum_at, ip_csum)
    if udp_off:
        return
    if tup.proto == UDP and l4_csum == 0:
        l4_csum = 0xFFFF
    _U16.pack_into(buf, l4_csum_at, l4_csum)


# -- construction and verification helpers ------------------------------------

def build_packet(tup: FiveTuple, length: int = 64, payload: bytes = b"",
                 ttl: int = 64, ip_id: int = 0, udp_checksum: bool = True,
                 ip_options: bytes = b"") -> bytearray:
    """Build an Ethernet/IPv4/TCP|UDP frame of exactly ``length`` bytes.

    The payload is repeated or truncated to fill the frame.  Both checksums
    are computed in full.
    """
    if len(ip_options) % 4:
        raise ValueError("IP options must be a multiple of 4 bytes")
    ihl = 20 + len(ip_options)
    l4_hlen = 20 if tup.proto == TCP else 8
    min_len = ETH_HLEN + ihl + l4_hlen
    if length < min_len:
        raise ValueError(f"frame length {length} below minimum {min_len}")
    body_len = length - min_len
    if payload:
        body = (payload * (body_len // len(payload) + 1))[:body_len]
    else:
        body = bytes(body_len)

    buf = bytearray(length)
    buf[0:6] = b"\x02\x00\x00\x00\x00\x02"
    buf[6:12] = b"\x02\x00\x00\x00\x00\x01"
    _U16.pack_into(buf, 12, ETHERTYPE_IPV4)
    l3 = ETH_HLEN
    total_len = length - ETH_HLEN
    _IPV4_FIXED.pack_into(buf, l3, 0x40 | ihl // 4, 0, total_len, ip_id & 0xFFFF,
                          0x4000, ttl, tup.proto, 0,
                          _U32.pack(tup.src_ip), _U32.pack(tup.dst_ip))
    buf[l3 + 20:l3 + ihl] = ip_options
    _U16.pack_into(buf, l3 + 10, full_checksum(buf[l3:l3 + ihl]))

    l4 = l3 + ihl
    seg_len = length - l4
    if tup.proto == TCP:
        struct.pack_into("!HHIIBBHHH", buf, l4, tup.src_port, tup.dst_port,
                         1, 0, 5 << 4, 0x02, 65535, 0, 0)
    else:
        struct.pack_into("!HHHH", buf, l4, tup.src_port, tup.dst_port, seg_len, 0)
    buf[l4 + l4_hlen:] = body
    if tup.proto == TCP or udp_checksum:
        csum = full_checksum(buf[l4:], pseudo_header(tup.src_ip, tup.dst_ip,
                                                     tup.proto, seg_len))
        if tup.proto == UDP and csum == 0:
            csum = 0xFFFF
        view = HeaderView(l3, l4, ihl, tup)
        _U16.pack_into(buf, view.l4_checksum_offset, csum)
    return buf


def checksums_valid(buf) -> bool:
    """Full recomputation check of the IPv4 header and L4 checksums."""
    view = parse_packet(buf)
    l3, l4 = view.l3_offset, view.l4_offset
    if ones_complement_sum(buf[l3:l4]) != 0xFFFF:
        return False
    tup = view.tuple
    total_len = (buf[l3 + 2] << 8) | buf[l3 + 3]
    seg = buf[l4:l3 + total_len]
    if tup.proto == UDP and buf[l4 + 6] == 0 and buf[l4 + 7] == 0:
        return True
    ph = pseudo_header(tup.src_ip, tup.dst_ip, tup.proto, len(seg))
    return ones_complement_sum(seg, ones_complement_sum(ph)) == 0xFFFF
