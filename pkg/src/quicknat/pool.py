"""
Translation endpoint allocation.

A pair ``(ip, port)`` from a rule's target pool may be reused for flows to
different peers, because the peer endpoint already keeps the translated
five-tuples apart.  It is never handed to two live flows towards the same
``(peer ip, peer port, proto)``.

Pools can be split into stripes so that several workers allocate from the
same target without talking to each other: pair number
``k = port_index * n_ips + ip_index`` belongs to stripe ``k % n_stripes``.
"""

import logging
from typing import Dict, Iterable, Optional, Set, Tuple

from .packet import FiveTuple
from .rules import SNAT, Direction, TargetPool

log = logging.getLogger(__name__)

Pair = Tuple[int, int]
PeerKey = Tuple[int, int, int]


class PoolExhausted(Exception):
    pass


def peer_key(tup: FiveTuple, direction: Direction) -> PeerKey:
    """The remote endpoint that keeps translated tuples of this pool distinct."""
    if direction is SNAT:
        return (tup.dst_ip, tup.dst_port, tup.proto)
    return (tup.src_ip, tup.src_port, tup.proto)


class PoolState:
    def __init__(self, pool: TargetPool, n_stripes: int = 1,
                 owned: Optional[Iterable[int]] = None):
        self.pool = pool
        self.n_stripes = n_stripes
        self.owned = sorted(set(range(n_stripes) if owned is None else owned))
        if any(not 0 <= s < n_stripes for s in self.owned):
            raise ValueError("owned stripe out of range")
        self._owned_set = frozenset(self.owned)
        n = pool.size
        self.capacity = sum(max(0, -(-(n - s) // n_stripes)) for s in self.owned)
        self.next_cursor = 0
        self._used: Dict[PeerKey, Set[Pair]] = {}
        self._owner: Dict[FiveTuple, Tuple[PeerKey, Pair]] = {}

    def __repr__(self):
        return f"PoolState({self.pool}, stripes={self.owned}/{self.n_stripes}, live={self.live})"

    @property
    def live(self) -> int:
        return len(self._owner)

    def free_count(self, peer: PeerKey) -> int:
        return self.capacity - len(self._used.get(peer, ()))

    def holder(self, flow_key: FiveTuple) -> Optional[Pair]:
        entry = self._owner.get(flow_key)
        return entry[1] if entry else None

    def _pair(self, k: int) -> Pair:
        n_ips = self.pool.n_ips
        return self.pool.ip_lo + k % n_ips, self.pool.port_lo + k // n_ips

    def _owned_index(self, j: int) -> int:
        return (j // len(self.owned)) * self.n_stripes + self.owned[j % len(self.owned)]

    def allocate(self, tup: FiveTuple, direction: Direction) -> Pair:
        """Pick a pair for the flow ``tup`` seen at the ``direction`` stage.

        The flow's own port is kept when it lies in the pool and is free for
        this peer; otherwise the search continues round-robin from the
        cursor.
        """
        if tup in self._owner:
            return self._owner[tup][1]
        peer = peer_key(tup, direction)
        used = self._used.get(peer)
        pool = self.pool
        orig_port = tup.src_port if direction is SNAT else tup.dst_port
        pair = None
        if pool.port_lo <= orig_port <= pool.port_hi:
            base = (orig_port - pool.port_lo) * pool.n_ips
            for ip_idx in range(pool.n_ips):
                k = base + ip_idx
                if k % self.n_stripes in self._owned_set:
                    cand = self._pair(k)
                    if used is None or cand not in used:
                        pair = cand
                        break
        if pair is None:
            cap = self.capacity
            if used is not None and len(used) >= cap:
                raise PoolExhausted(f"{pool} has no free pair towards peer {peer}")
            j = self.next_cursor
            for _ in range(cap):
                k = self._owned_index(j)
                j = (j + 1) % cap
                cand = self._pair(k)
                if used is None or cand not in used:
                    pair = cand
                    break
            if pair is None:
                raise PoolExhausted(f"{pool} has no free pair towards peer {peer}")
            self.next_cursor = j
        self._used.setdefault(peer, set()).add(pair)
        self._owner[tup] = (peer, pair)
        return pair

    def release(self, pair: Pair, flow_key: FiveTuple) -> None:
        entry = self._owner.get(flow_key)
        if entry is None or entry[1] != pair:
            log.debug("release of unallocated pair %s for %s ignored", pair, flow_key)
            return
        del self._owner[flow_key]
        peer = entry[0]
        used = self._used[peer]
        used.discard(pair)
        if not used:
            del self._used[peer]

    def live_pairs(self):
        """``(peer, pair)`` for every live allocation."""
        return list(self._owner.values())


def allocate(pool: PoolState, orig_tuple: FiveTuple, direction: Direction) -> Pair:
    return pool.allocate(orig_tuple, direction)


def release(pool: PoolState, pair: Pair, flow_key: FiveTuple) -> None:
    pool.release(pair, flow_key)
