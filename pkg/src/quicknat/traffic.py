"""
Packet sources and sinks: classic pcap files and a seeded flow generator.

Records are ``(ts_us, buf)`` pairs: an integer timestamp in microseconds and
a ``bytearray`` frame.
"""

import ipaddress
import random
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

from .packet import TCP, UDP, FiveTuple, build_packet

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_SWAPPED = 0xD4C3B2A1
LINKTYPE_ETHERNET = 1
DEFAULT_SNAPLEN = 65535

Record = Tuple[int, bytearray]


class PcapError(Exception):
    pass


class BadMagic(PcapError):
    pass


class TruncatedRecord(PcapError):
    pass


class IoFailure(PcapError):
    pass


def pcap_read(path) -> Iterator[Record]:
    """Yield ``(ts_us, frame)`` for each record of a classic pcap file."""
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    with f:
        head = f.read(24)
        if len(head) < 24:
            raise BadMagic(f"{path}: file shorter than a pcap global header")
        magic = struct.unpack("<I", head[:4])[0]
        if magic == PCAP_MAGIC:
            endian = "<"
        elif magic == PCAP_MAGIC_SWAPPED:
            endian = ">"
        else:
            raise BadMagic(f"{path}: magic 0x{magic:08x}")
        rec = struct.Struct(endian + "IIII")
        while True:
            hdr = f.read(16)
            if not hdr:
                return
            if len(hdr) < 16:
                raise TruncatedRecord(f"{path}: partial record header")
            ts_sec, ts_usec, incl_len, _orig_len = rec.unpack(hdr)
            data = f.read(incl_len)
            if len(data) < incl_len:
                raise TruncatedRecord(f"{path}: record needs {incl_len} bytes, got {len(data)}")
            yield ts_sec * 1_000_000 + ts_usec, bytearray(data)


def pcap_write(path, records: Iterable[Record], snaplen: int = DEFAULT_SNAPLEN) -> int:
    """Write records as a little-endian, microsecond pcap; returns the count."""
    n = 0
    try:
        with open(path, "wb") as f:
            f.write(struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, snaplen,
                                LINKTYPE_ETHERNET))
            for ts_us, buf in records:
                sec, usec = divmod(ts_us, 1_000_000)
                f.write(struct.pack("<IIII", sec, usec, len(buf), len(buf)))
                f.write(buf)
                n += 1
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return n


class SpaceExhausted(ValueError):
    pass


@dataclass
class FlowSpec:
    """Shape of a synthetic workload.

    Sources are drawn from ``src_net`` and ``src_ports``, destinations from
    ``dst_net`` and ``dst_ports`` (any sequence, typically a ``range``).  Packets are emitted
    round-robin over flows, ``pkts_per_flow`` rounds.
    """

    flows: int = 8000
    length: int = 64
    pkts_per_flow: int = 1
    src_net: str = "192.168.0.0/16"
    dst_net: str = "100.64.0.0/10"
    src_ports: Sequence[int] = range(1024, 65536)
    dst_ports: Sequence[int] = range(1, 65536)
    protos: Sequence[int] = (TCP, UDP)
    seed: int = 1
    ts_start_us: int = 0
    ts_step_us: int = 1

    @classmethod
    def parse(cls, text: str) -> "FlowSpec":
        """Parse ``"flows=8000,len=64,pkts=N,seed=S"``."""
        names = {"flows": "flows", "len": "length", "length": "length",
                 "pkts": "pkts_per_flow", "seed": "seed"}
        kwargs = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, value = part.partition("=")
            if key not in names or not value:
                raise ValueError(f"bad synthetic spec item {part!r}")
            kwargs[names[key]] = int(value)
        return cls(**kwargs)


def gen_tuples(spec: FlowSpec) -> List[FiveTuple]:
    """Pairwise-distinct five-tuples, deterministic under ``spec.seed``."""
    rng = random.Random(spec.seed)
    src = ipaddress.IPv4Network(spec.src_net)
    dst = ipaddress.IPv4Network(spec.dst_net)
    src_lo, dst_lo = int(src.network_address), int(dst.network_address)
    sports, dports = spec.src_ports, spec.dst_ports
    protos = list(spec.protos)
    seen = set()
    out = []
    attempts = 0
    limit = spec.flows * 20 + 1000
    while len(out) < spec.flows:
        attempts += 1
        if attempts > limit:
            raise SpaceExhausted(f"could not draw {spec.flows} distinct flows")
        t = FiveTuple(src_lo + rng.randrange(src.num_addresses),
                      dst_lo + rng.randrange(dst.num_addresses),
                      rng.choice(sports), rng.choice(dports), rng.choice(protos))
        if t in seen:
            continue
        seen.add(t)
        out.append(t)
    return out


def payload_pattern(flow_index: int, seq: int) -> bytes:
    """Counted payload so that corruption of a frame body is detectable."""
    return bytes((flow_index + seq + i) & 0xFF for i in range(256))


def gen_flows(spec: FlowSpec, tuples: Optional[Sequence[FiveTuple]] = None) -> Iterator[Record]:
    """Frames of the workload described by ``spec``."""
    if tuples is None:
        tuples = gen_tuples(spec)
    ts = spec.ts_start_us
    for seq in range(spec.pkts_per_flow):
        for i, t in enumerate(tuples):
            yield ts, build_packet(t, spec.length, payload_pattern(i, seq),
                                   ip_id=seq)
            ts += spec.ts_step_us
