"""
NAT rules and the mask-partitioned hash rule tables (QNS lookup).

Rules live in one hash subtable per (direction, prefix length): 32 for SNAT
and 32 for DNAT.  A lookup walks the non-empty subtables from the longest
mask down, probing at most two buckets in each: first a key carrying the
packet's port (exact-port rules), then a key without it (wildcard-port
rules).  The first match wins, so the most specific rule is found first.

:func:`linear_lookup` scans a priority-sorted rule list and serves as both
the sequential-search baseline and the oracle for QNS.
"""

import enum
from bisect import insort
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

from .packet import TCP, UDP, FiveTuple, int_to_ip, ip_to_int

ANY = 0
WILDCARD = None
NBUCKETS = 1 << 16

FNV_OFFSET = 0x811C9DC5
FNV_PRIME = 0x01000193

MASKS = [0] + [(0xFFFFFFFF << (32 - m)) & 0xFFFFFFFF for m in range(1, 33)]
_PROTO_NAMES = {TCP: "tcp", UDP: "udp", ANY: "any"}


class Direction(enum.Enum):
    SNAT = "snat"
    DNAT = "dnat"

    def __str__(self):
        return self.value


SNAT = Direction.SNAT
DNAT = Direction.DNAT


class RuleError(Exception):
    pass


class DuplicateRuleId(RuleError):
    pass


class RuleNotFound(RuleError, KeyError):
    pass


def mask_ip(ip: int, mask_len: int) -> int:
    return ip & MASKS[mask_len]


def fnv1a_32(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFF
    return h


def fold16(h: int) -> int:
    return (h >> 16) ^ (h & 0xFFFF)


def bucket_hash(masked_ip: int, port: Optional[int], proto: int) -> int:
    """16-bit bucket index of a lookup key.

    FNV-1a over ``ip (4 bytes BE) | port (2 bytes BE, omitted when None) |
    proto (1 byte)``, folded by XOR of its 16-bit halves.  Unrolled, since
    this sits on the lookup fast path.
    """
    p = FNV_PRIME
    h = ((FNV_OFFSET ^ (masked_ip >> 24)) * p) & 0xFFFFFFFF
    h = ((h ^ ((masked_ip >> 16) & 0xFF)) * p) & 0xFFFFFFFF
    h = ((h ^ ((masked_ip >> 8) & 0xFF)) * p) & 0xFFFFFFFF
    h = ((h ^ (masked_ip & 0xFF)) * p) & 0xFFFFFFFF
    if port is not None:
        h = ((h ^ (port >> 8)) * p) & 0xFFFFFFFF
        h = ((h ^ (port & 0xFF)) * p) & 0xFFFFFFFF
    h = ((h ^ proto) * p) & 0xFFFFFFFF
    return (h >> 16) ^ (h & 0xFFFF)


@dataclass(frozen=True)
class TargetPool:
    """Inclusive ranges of translation addresses and ports."""

    ip_lo: int
    ip_hi: int
    port_lo: int
    port_hi: int

    def __post_init__(self):
        if not (0 <= self.ip_lo <= self.ip_hi <= 0xFFFFFFFF):
            raise ValueError("bad pool address range")
        if not (0 <= self.port_lo <= self.port_hi <= 0xFFFF):
            raise ValueError("bad pool port range")

    @classmethod
    def of(cls, ip, ports=None, ip_hi=None):
        lo = ip_to_int(ip)
        hi = ip_to_int(ip_hi) if ip_hi is not None else lo
        if ports is None:
            ports = (1024, 65535)
        elif isinstance(ports, int):
            ports = (ports, ports)
        return cls(lo, hi, ports[0], ports[1])

    @property
    def n_ips(self) -> int:
        return self.ip_hi - self.ip_lo + 1

    @property
    def n_ports(self) -> int:
        return self.port_hi - self.port_lo + 1

    @property
    def size(self) -> int:
        return self.n_ips * self.n_ports

    def __str__(self):
        ips = int_to_ip(self.ip_lo)
        if self.ip_hi != self.ip_lo:
            ips += "-" + int_to_ip(self.ip_hi)
        ports = str(self.port_lo)
        if self.port_hi != self.port_lo:
            ports += f"-{self.port_hi}"
        return f"{ips}:{ports}"


@dataclass(frozen=True)
class NatRule:
    direction: Direction
    prefix: int
    mask_len: int
    port: Optional[int]
    proto: int
    target: TargetPool
    rule_id: int
    insert_seq: int = 0

    def __post_init__(self):
        if not 1 <= self.mask_len <= 32:
            raise ValueError(f"mask length {self.mask_len} outside 1..32")
        if self.prefix & ~MASKS[self.mask_len] & 0xFFFFFFFF:
            raise ValueError("prefix has host bits set; use NatRule.make")
        if self.proto not in (TCP, UDP, ANY):
            raise ValueError(f"unsupported rule protocol {self.proto}")
        if self.port is not None and not 0 <= self.port <= 0xFFFF:
            raise ValueError("port out of range")

    @classmethod
    def make(cls, direction, prefix, mask_len, port=WILDCARD, proto=ANY,
             target=None, rule_id=0, insert_seq=None):
        """Build a rule, canonicalising the prefix by masking it."""
        if isinstance(direction, str):
            direction = Direction(direction)
        ip = mask_ip(ip_to_int(prefix), mask_len) if 1 <= mask_len <= 32 else 0
        if target is None:
            target = TargetPool(0, 0, 0, 0)
        return cls(direction, ip, mask_len, port, proto, target, rule_id,
                   rule_id if insert_seq is None else insert_seq)

    @property
    def priority_key(self):
        return (-self.mask_len, self.port is None, self.insert_seq, self.rule_id)

    @property
    def chain_key(self):
        return (self.insert_seq, self.rule_id)

    def matches(self, tup: FiveTuple) -> bool:
        if self.direction is SNAT:
            ip, port = tup.src_ip, tup.src_port
        else:
            ip, port = tup.dst_ip, tup.dst_port
        return ((ip & MASKS[self.mask_len]) == self.prefix
                and (self.port is None or self.port == port)
                and (self.proto == ANY or self.proto == tup.proto))

    def probe_protos(self):
        return (TCP, UDP) if self.proto == ANY else (self.proto,)

    def __str__(self):
        port = "*" if self.port is None else str(self.port)
        return (f"{self.direction} {int_to_ip(self.prefix)}/{self.mask_len} "
                f"{_PROTO_NAMES[self.proto]} {port} -> {self.target}")


@dataclass
class Subtable:
    mask_len: int
    buckets: Dict[int, List[NatRule]] = field(default_factory=dict)
    count: int = 0

    @property
    def flag(self) -> int:
        return 1 if self.count else 0


class SubtableSet:
    """Single-owner QNS rule tables."""

    def __init__(self, rules: Iterable[NatRule] = ()):
        self.tables = {d: [Subtable(m) for m in range(33)] for d in Direction}
        # bit m set <=> subtable m non-empty
        self.flags = {d: 0 for d in Direction}
        self._by_id: Dict[int, NatRule] = {}
        self.probes = 0
        for rule in rules:
            self.insert(rule)

    def __len__(self):
        return len(self._by_id)

    def __contains__(self, rule_id):
        return rule_id in self._by_id

    def rules(self) -> List[NatRule]:
        return list(self._by_id.values())

    def flag(self, direction: Direction, mask_len: int) -> int:
        return (self.flags[direction] >> mask_len) & 1

    def insert(self, rule: NatRule) -> None:
        if rule.rule_id in self._by_id:
            raise DuplicateRuleId(rule.rule_id)
        self._by_id[rule.rule_id] = rule
        sub = self.tables[rule.direction][rule.mask_len]
        for proto in rule.probe_protos():
            idx = bucket_hash(rule.prefix, rule.port, proto)
            insort(sub.buckets.setdefault(idx, []), rule, key=_chain_order)
            sub.count += 1
        self.flags[rule.direction] |= 1 << rule.mask_len

    def remove(self, rule_id: int) -> NatRule:
        try:
            rule = self._by_id.pop(rule_id)
        except KeyError:
            raise RuleNotFound(rule_id) from None
        sub = self.tables[rule.direction][rule.mask_len]
        for proto in rule.probe_protos():
            idx = bucket_hash(rule.prefix, rule.port, proto)
            chain = sub.buckets[idx]
            chain.remove(rule)
            if not chain:
                del sub.buckets[idx]
            sub.count -= 1
        if not sub.count:
            self.flags[rule.direction] &= ~(1 << rule.mask_len)
        return rule

    def chain(self, direction: Direction, mask_len: int, idx: int) -> List[NatRule]:
        return list(self.tables[direction][mask_len].buckets.get(idx, ()))

    def lookup(self, direction: Direction, tup: FiveTuple) -> Optional[NatRule]:
        if direction is SNAT:
            ip, port = tup.src_ip, tup.src_port
        else:
            ip, port = tup.dst_ip, tup.dst_port
        proto = tup.proto
        bits = self.flags[direction]
        tables = self.tables[direction]
        probes = 0
        while bits:
            m = bits.bit_length() - 1
            bits ^= 1 << m
            masked = ip & MASKS[m]
            buckets = tables[m].buckets
            probes += 2
            chain = buckets.get(bucket_hash(masked, port, proto))
            if chain:
                for r in chain:
                    if r.prefix == masked and r.port == port and (r.proto == proto or r.proto == ANY):
                        self.probes += probes - 1
                        return r
            chain = buckets.get(bucket_hash(masked, None, proto))
            if chain:
                for r in chain:
                    if r.prefix == masked and r.port is None and (r.proto == proto or r.proto == ANY):
                        self.probes += probes
                        return r
        self.probes += probes
        return None


def _chain_order(rule: NatRule):
    return rule.chain_key


def insert_rule(tables, rule: NatRule) -> None:
    tables.insert(rule)


def remove_rule(tables, rule_id: int) -> NatRule:
    return tables.remove(rule_id)


def qns_lookup(tables, direction: Direction, tup: FiveTuple) -> Optional[NatRule]:
    return tables.lookup(direction, tup)


def priority_order(rules: Iterable[NatRule]) -> List[NatRule]:
    """Sort rules into the order a sequential scan must use to agree with QNS."""
    return sorted(rules, key=lambda r: r.priority_key)


def linear_lookup(rules: Sequence[NatRule], direction: Direction,
                  tup: FiveTuple) -> Optional[NatRule]:
    """First rule in ``rules`` (already priority-ordered) matching ``tup``."""
    if direction is SNAT:
        ip, port = tup.src_ip, tup.src_port
    else:
        ip, port = tup.dst_ip, tup.dst_port
    proto = tup.proto
    for r in rules:
        if (r.direction is direction and (ip & MASKS[r.mask_len]) == r.prefix
                and (r.port is None or r.port == port)
                and (r.proto == ANY or r.proto == proto)):
            return r
    return None


class LinearRuleList:
    """Sequential-scan matcher with the same interface as :class:`SubtableSet`."""

    def __init__(self, rules: Iterable[NatRule] = ()):
        self._rules = priority_order(rules)

    def __len__(self):
        return len(self._rules)

    def rules(self):
        return list(self._rules)

    def insert(self, rule: NatRule) -> None:
        if any(r.rule_id == rule.rule_id for r in self._rules):
            raise DuplicateRuleId(rule.rule_id)
        insort(self._rules, rule, key=lambda r: r.priority_key)

    def remove(self, rule_id: int) -> NatRule:
        for i, r in enumerate(self._rules):
            if r.rule_id == rule_id:
                return self._rules.pop(i)
        raise RuleNotFound(rule_id)

    def lookup(self, direction: Direction, tup: FiveTuple) -> Optional[NatRule]:
        return linear_lookup(self._rules, direction, tup)
