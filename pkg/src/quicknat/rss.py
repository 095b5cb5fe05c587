"""
Software model of NIC receive-side scaling.

The Toeplitz hash runs over ``src_ip | dst_ip | src_port | dst_port`` (12
bytes, network order) and its low 7 bits index a 128-entry indirection
table of worker ids.  The protocol byte is not hashed.
"""

import struct
from dataclasses import dataclass, field
from typing import List, Sequence

from .packet import FiveTuple

# The de-facto verification key shipped with RSS test suites.
DEFAULT_KEY = bytes.fromhex(
    "6d5a56da255b0ec24167253d43a38fb0d0ca2bcbae7b30b477cb2da38030f20c"
    "6a42b73bbeac01fa"
)
KEY_LEN = 40
INDIRECTION_SIZE = 128

_LAYOUT = struct.Struct("!IIHH")


def toeplitz_hash(key: bytes, data: bytes) -> int:
    """Bit-serial Toeplitz hash of ``data`` (at most 36 bytes) under ``key``."""
    if len(data) > len(key) - 4:
        raise ValueError("input longer than key allows")
    key_int = int.from_bytes(key, "big")
    key_bits = len(key) * 8
    result = 0
    for i, byte in enumerate(data):
        for b in range(8):
            if byte & (0x80 >> b):
                shift = key_bits - 32 - (i * 8 + b)
                result ^= (key_int >> shift) & 0xFFFFFFFF
    return result


def _byte_tables(key: bytes, nbytes: int) -> List[List[int]]:
    # tables[i][v] is the hash contribution of byte value v at input position i
    key_int = int.from_bytes(key, "big")
    key_bits = len(key) * 8
    tables = []
    for i in range(nbytes):
        windows = [(key_int >> (key_bits - 32 - (i * 8 + b))) & 0xFFFFFFFF
                   for b in range(8)]
        row = [0] * 256
        for v in range(1, 256):
            acc = 0
            for b in range(8):
                if v & (0x80 >> b):
                    acc ^= windows[b]
            row[v] = acc
        tables.append(row)
    return tables


def tuple_layout(tup: FiveTuple) -> bytes:
    return _LAYOUT.pack(tup.src_ip, tup.dst_ip, tup.src_port, tup.dst_port)


@dataclass
class RssConfig:
    key: bytes = DEFAULT_KEY
    nworkers: int = 1
    indirection: Sequence[int] = None
    _tables: List[List[int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.key) != KEY_LEN:
            raise ValueError(f"RSS key must be {KEY_LEN} bytes, got {len(self.key)}")
        if self.nworkers < 1:
            raise ValueError("need at least one worker")
        if self.indirection is None:
            self.indirection = [i % self.nworkers for i in range(INDIRECTION_SIZE)]
        self.indirection = tuple(self.indirection)
        if len(self.indirection) != INDIRECTION_SIZE:
            raise ValueError(f"indirection table must have {INDIRECTION_SIZE} entries")
        if any(not 0 <= w < self.nworkers for w in self.indirection):
            raise ValueError("indirection entry out of worker range")
        self._tables = _byte_tables(self.key, _LAYOUT.size)

    def hash_tuple(self, tup: FiveTuple) -> int:
        t = self._tables
        s, d, sp, dp = tup.src_ip, tup.dst_ip, tup.src_port, tup.dst_port
        return (t[0][s >> 24] ^ t[1][(s >> 16) & 0xFF] ^ t[2][(s >> 8) & 0xFF]
                ^ t[3][s & 0xFF] ^ t[4][d >> 24] ^ t[5][(d >> 16) & 0xFF]
                ^ t[6][(d >> 8) & 0xFF] ^ t[7][d & 0xFF] ^ t[8][sp >> 8]
                ^ t[9][sp & 0xFF] ^ t[10][dp >> 8] ^ t[11][dp & 0xFF])

    def bucket_for_tuple(self, tup: FiveTuple) -> int:
        """Indirection-table index the tuple hashes to."""
        return self.hash_tuple(tup) % INDIRECTION_SIZE

    def core_for_tuple(self, tup: FiveTuple) -> int:
        return self.indirection[self.hash_tuple(tup) % INDIRECTION_SIZE]


def core_for_tuple(cfg: RssConfig, tup: FiveTuple) -> int:
    return cfg.core_for_tuple(tup)
