import pytest

from quicknat.packet import FiveTuple
from quicknat.rules import SNAT, NatRule, TargetPool

# the example flow used throughout: an inside host talking to a web server
FLOW = FiveTuple.of(("192.168.88.32", 1234), ("103.235.46.39", 80))
POOL = TargetPool.of("101.200.1.1", (1000, 2000))


def word_sum_checksum(data: bytes) -> int:
    """Reference Internet checksum: plain 32-bit accumulation, folded once at the end."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    acc = sum(int.from_bytes(data[i:i + 2], "big") for i in range(0, len(data), 2))
    while acc > 0xFFFF:
        acc = (acc & 0xFFFF) + (acc >> 16)
    return (~acc) & 0xFFFF


@pytest.fixture
def flow():
    return FLOW


@pytest.fixture
def snat24():
    return NatRule.make(SNAT, "192.168.88.0", 24, None, 6, POOL, rule_id=1)


# -- acceptance verdict lines -----------------------------------------------------

ACCEPTANCE = []


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((number, title, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE):
        verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        terminalreporter.write_line(f"[{verdict}] {number:2d}. {title}: {detail}")
