"""
Rule file format, one rule per line::

    snat 192.168.88.0/24 tcp * -> 101.200.1.1:1000-2000
    dnat 101.200.2.10/32 tcp 80 -> 10.0.0.1-10.0.0.4:8080

``#`` starts a comment; blank lines are ignored.  A ``/0`` prefix is
expanded into the two ``/1`` halves, since the rule tables have no
zero-length subtable.
"""

import re
from typing import Iterable, List

from .packet import TCP, UDP, ip_to_int
from .rules import ANY, Direction, NatRule, TargetPool

_PROTOS = {"tcp": TCP, "udp": UDP, "any": ANY}
_LINE = re.compile(
    r"^(?P<dir>\S+)\s+(?P<prefix>\S+)\s+(?P<proto>\S+)\s+(?P<port>\S+)"
    r"\s*->\s*(?P<target>\S+)$"
)


class RuleParseError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


def _port(text: str) -> int:
    value = int(text)
    if not 0 <= value <= 0xFFFF:
        raise ValueError(f"port {value} out of range")
    return value


def _range(text: str, conv):
    lo, sep, hi = text.partition("-")
    lo = conv(lo)
    hi = conv(hi) if sep else lo
    if hi < lo:
        raise ValueError(f"empty range {text}")
    return lo, hi


def parse_target(text: str) -> TargetPool:
    ips, sep, ports = text.rpartition(":")
    if not sep:
        raise ValueError(f"target {text!r} needs <ip>:<port>")
    ip_lo, ip_hi = _range(ips, ip_to_int)
    port_lo, port_hi = _range(ports, _port)
    return TargetPool(ip_lo, ip_hi, port_lo, port_hi)


def parse_rule_line(text: str, lineno: int, first_id: int) -> List[NatRule]:
    m = _LINE.match(text)
    if not m:
        raise RuleParseError(lineno, "expected '<snat|dnat> <prefix>/<len> <proto> <port|*> -> <target>'")
    try:
        direction = Direction(m["dir"].lower())
    except ValueError:
        raise RuleParseError(lineno, f"unknown direction {m['dir']!r}") from None
    addr, slash, mask = m["prefix"].partition("/")
    try:
        ip = ip_to_int(addr)
    except ValueError:
        raise RuleParseError(lineno, f"bad address {addr!r}") from None
    if not slash:
        mask_len = 32
    elif not mask.isdigit():
        raise RuleParseError(lineno, f"bad mask {mask!r}")
    else:
        mask_len = int(mask)
        if mask_len > 32:
            raise RuleParseError(lineno, f"mask out of range: /{mask_len}")
    proto = _PROTOS.get(m["proto"].lower())
    if proto is None:
        raise RuleParseError(lineno, f"unknown protocol {m['proto']!r}")
    port = None
    if m["port"] != "*":
        try:
            port = _port(m["port"])
        except ValueError as exc:
            raise RuleParseError(lineno, str(exc)) from None
    try:
        target = parse_target(m["target"])
    except ValueError as exc:
        raise RuleParseError(lineno, str(exc)) from None
    prefixes = [(ip, mask_len)] if mask_len else [(0, 1), (0x80000000, 1)]
    return [NatRule.make(direction, p, ml, port, proto, target,
                         rule_id=first_id + i, insert_seq=first_id + i)
            for i, (p, ml) in enumerate(prefixes)]


def parse_rules_text(text: str) -> List[NatRule]:
    rules: List[NatRule] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            rules.extend(parse_rule_line(line, lineno, len(rules)))
    return rules


def parse_rules(path) -> List[NatRule]:
    with open(path, encoding="utf-8") as f:
        return parse_rules_text(f.read())


def format_rules(rules: Iterable[NatRule]) -> str:
    return "".join(f"{r}\n" for r in rules)
