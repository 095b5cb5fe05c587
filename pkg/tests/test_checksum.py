import random
import struct

from hypothesis import given, strategies as st

from conftest import word_sum_checksum
from quicknat.packet import full_checksum, incremental_checksum, ones_complement_sum

u16 = st.integers(0, 0xFFFF)


def test_noop_update_returns_old():
    assert incremental_checksum(0x1234, 0xBEEF, 0xBEEF) == 0x1234


def test_zero_header():
    assert full_checksum(bytes(20)) == 0xFFFF


def test_received_header_self_verifies():
    hdr = bytearray.fromhex("450000730000400040110000c0a80001c0a800c7")
    hdr[10:12] = full_checksum(hdr).to_bytes(2, "big")
    assert ones_complement_sum(hdr) == 0xFFFF


def test_hand_built_header_against_script():
    hdr = bytes.fromhex("450000730000400040110000c0a80001c0a800c7")
    # well-known worked example: checksum of this header is 0xb861
    assert word_sum_checksum(hdr) == 0xB861
    assert full_checksum(hdr) == 0xB861


def _random_block(rng, words):
    return [rng.getrandbits(16) for _ in range(words)]


def _pack(words):
    return struct.pack(f"!{len(words)}H", *words)


def test_random_updates_match_full_recompute():
    rng = random.Random(7)
    for _ in range(10_000):
        words = _random_block(rng, 10)
        csum = word_sum_checksum(_pack(words))
        i = rng.randrange(10)
        new = rng.getrandbits(16)
        updated = incremental_checksum(csum, words[i], new)
        words[i] = new
        expect = word_sum_checksum(_pack(words))
        # +0/-0: both encodings verify; the update form never yields 0xFFFF from a nonzero sum
        assert ones_complement_sum(_pack(words), updated) == 0xFFFF
        assert updated == expect or {updated, expect} == {0, 0xFFFF}


@given(st.lists(u16, min_size=4, max_size=12), st.data())
def test_chained_updates_commute(words, data):
    i, j = data.draw(st.integers(0, len(words) - 1)), data.draw(st.integers(0, len(words) - 1))
    if i == j:
        return
    a, b = data.draw(u16), data.draw(u16)
    c0 = word_sum_checksum(_pack(words))
    c1 = incremental_checksum(incremental_checksum(c0, words[i], a), words[j], b)
    c2 = incremental_checksum(incremental_checksum(c0, words[j], b), words[i], a)
    assert c1 == c2
    words[i], words[j] = a, b
    assert ones_complement_sum(_pack(words), c1) == 0xFFFF


@given(st.binary(max_size=64))
def test_full_checksum_matches_reference(data):
    assert full_checksum(data) == word_sum_checksum(data)
