import pytest
from hypothesis import given, strategies as st

from conftest import FLOW
from quicknat.packet import FiveTuple, ip_to_int
from quicknat.rss import (DEFAULT_KEY, INDIRECTION_SIZE, RssConfig, core_for_tuple,
                          toeplitz_hash, tuple_layout)

# published RSS verification vectors for the default key (IPv4, with ports)
VECTORS = [
    (("66.9.149.187", 2794), ("161.142.100.80", 1766), 0x51CCC178),
    (("199.92.111.2", 14230), ("65.69.140.83", 4739), 0xC626B0EA),
]


def reference_toeplitz(key: bytes, data: bytes) -> int:
    """Sliding 32-bit window over the key, shifted one bit per input bit."""
    kbits = "".join(f"{b:08b}" for b in key)
    out = 0
    for i, bit in enumerate("".join(f"{b:08b}" for b in data)):
        if bit == "1":
            out ^= int(kbits[i:i + 32], 2)
    return out


@pytest.mark.parametrize("src, dst, expect", VECTORS)
def test_published_vectors(src, dst, expect):
    t = FiveTuple.of(src, dst)
    data = tuple_layout(t)
    assert reference_toeplitz(DEFAULT_KEY, data) == expect
    assert toeplitz_hash(DEFAULT_KEY, data) == expect
    assert RssConfig().hash_tuple(t) == expect


def test_zero_input():
    assert toeplitz_hash(DEFAULT_KEY, bytes(12)) == 0
    assert toeplitz_hash(bytes(range(40)), bytes(12)) == 0


def test_single_leading_bit_selects_top_window():
    assert toeplitz_hash(DEFAULT_KEY, b"\x80" + bytes(11)) == int.from_bytes(DEFAULT_KEY[:4], "big")


@given(st.binary(min_size=40, max_size=40), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
       st.integers(0, 0xFFFF), st.integers(0, 0xFFFF))
def test_table_path_equals_bit_serial(key, s, d, sp, dp):
    t = FiveTuple(s, d, sp, dp, 6)
    assert RssConfig(key, 4).hash_tuple(t) == reference_toeplitz(key, tuple_layout(t))


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_single_worker_always_zero(s, d):
    assert core_for_tuple(RssConfig(nworkers=1), FiveTuple(s, d, 1, 2, 6)) == 0


def test_deterministic_and_in_range():
    cfg = RssConfig(nworkers=3)
    assert core_for_tuple(cfg, FLOW) == core_for_tuple(cfg, FLOW)
    assert 0 <= cfg.core_for_tuple(FLOW) < 3
    assert cfg.indirection == tuple(i % 3 for i in range(INDIRECTION_SIZE))


def test_custom_indirection():
    cfg = RssConfig(nworkers=2, indirection=[1] * INDIRECTION_SIZE)
    assert cfg.core_for_tuple(FLOW) == 1


@pytest.mark.parametrize("kwargs", [dict(key=b"short"), dict(nworkers=0),
                                    dict(nworkers=2, indirection=[2] * 128),
                                    dict(nworkers=2, indirection=[0] * 5)])
def test_bad_config(kwargs):
    with pytest.raises(ValueError):
        RssConfig(**kwargs)


def test_reply_of_translated_flow_has_an_owner():
    cfg = RssConfig(nworkers=2)
    translated = FLOW.rewritten((ip_to_int("101.200.1.1"), 1234), None)
    assert core_for_tuple(cfg, translated.reverse()) in (0, 1)


def test_reverse_direction_usually_lands_elsewhere():
    import random
    rng = random.Random(0)
    cfg = RssConfig(nworkers=4)
    for _ in range(1000):
        t = FiveTuple(rng.getrandbits(32), rng.getrandbits(32), rng.getrandbits(16),
                      rng.getrandbits(16), 6)
        if cfg.core_for_tuple(t) != cfg.core_for_tuple(t.reverse()):
            return
    pytest.fail("no asymmetric tuple found")
