"""
Lock-free QNS rule tables shared by all workers.

CPython gives no access to a hardware compare-and-swap, so :func:`cas_attr`
and :func:`cas_item` emulate one: a striped lock is held only for the
compare and the store, never around user code, which is what a ``LOCK
CMPXCHG`` does to a cache line.  Everything built on top follows the
lock-free discipline: readers never take a lock, and writers only change
shared links through CAS, retrying from a fresh read when it fails.

Bucket chains are Harris-style ordered lists.  Removal first marks a node's
``next`` link (logical delete), then unlinks it with a CAS.  Unlinked nodes
are handed to an :class:`EpochManager` and only reclaimed once every reader
that could still hold a reference has left its read section.  Reclamation
poisons the node so that a premature free shows up as a torn read.
"""

import threading
from collections import deque
from typing import Dict, Iterable, List, Optional

from .packet import FiveTuple
from .rules import (ANY, MASKS, NBUCKETS, SNAT, Direction, DuplicateRuleId,
                    NatRule, RuleNotFound, bucket_hash)

_NSTRIPES = 256
_stripes = [threading.Lock() for _ in range(_NSTRIPES)]


def _stripe(obj) -> threading.Lock:
    return _stripes[(id(obj) >> 4) % _NSTRIPES]


def cas_attr(obj, name: str, expected, new) -> bool:
    """Atomically set ``obj.name = new`` if it is currently ``expected``."""
    with _stripe(obj):
        if getattr(obj, name) is expected:
            setattr(obj, name, new)
            return True
    return False


def cas_item(seq: list, idx: int, expected, new) -> bool:
    """Atomically set ``seq[idx] = new`` if it is currently ``expected``."""
    with _stripes[(id(seq) + idx) % _NSTRIPES]:
        if seq[idx] is expected:
            seq[idx] = new
            return True
    return False


class AtomicInt:
    __slots__ = ("value",)

    def __init__(self, value: int = 0):
        self.value = value

    def get(self) -> int:
        return self.value

    def compare_and_set(self, expected: int, new: int) -> bool:
        with _stripe(self):
            if self.value == expected:
                self.value = new
                return True
        return False

    def fetch_add(self, delta: int) -> int:
        while True:
            cur = self.value
            if self.compare_and_set(cur, cur + delta):
                return cur

    def fetch_or(self, bits: int) -> int:
        while True:
            cur = self.value
            if self.compare_and_set(cur, cur | bits):
                return cur

    def fetch_and(self, bits: int) -> int:
        while True:
            cur = self.value
            if self.compare_and_set(cur, cur & bits):
                return cur


class TornRead(RuntimeError):
    """A reader reached a node that had already been reclaimed."""


_POISON = object()
_UNMARKED_END = (None, False)


class Node:
    __slots__ = ("rule", "key", "next")

    def __init__(self, rule: NatRule, nxt=None):
        self.rule = rule
        self.key = rule.chain_key
        self.next = (nxt, False)  # (successor, logically deleted)


class ReaderSlot:
    __slots__ = ("epoch",)

    def __init__(self):
        self.epoch = None  # None while outside a read section


class EpochManager:
    """Epoch-based deferred reclamation.

    A node retired during epoch ``e`` is reclaimed once the global epoch
    reaches ``e + 2``; the epoch only advances when every reader inside a
    read section has observed the current one.
    """

    def __init__(self):
        self.epoch = AtomicInt(0)
        self._slots: List[ReaderSlot] = []
        self._register_lock = threading.Lock()
        self._local = threading.local()
        self._limbo = deque()
        self._reclaiming = AtomicInt(0)
        self.retired = 0
        self.reclaimed = 0

    def slot(self) -> ReaderSlot:
        slot = getattr(self._local, "slot", None)
        if slot is None:
            slot = ReaderSlot()
            with self._register_lock:  # registration only, never on lookups
                self._slots = self._slots + [slot]
            self._local.slot = slot
        return slot

    def retire(self, node: Node) -> None:
        self._limbo.append((self.epoch.value, node))
        self.retired += 1
        self.collect()

    def try_advance(self) -> bool:
        cur = self.epoch.value
        for s in self._slots:
            e = s.epoch
            if e is not None and e != cur:
                return False
        return self.epoch.compare_and_set(cur, cur + 1)

    def collect(self) -> int:
        """Advance the epoch if possible and reclaim what is now safe."""
        if not self._reclaiming.compare_and_set(0, 1):
            return 0
        freed = 0
        try:
            self.try_advance()
            horizon = self.epoch.value - 2
            limbo = self._limbo
            while limbo and limbo[0][0] <= horizon:
                _, node = limbo.popleft()
                node.rule = None
                node.next = (_POISON, True)
                freed += 1
        finally:
            self.reclaimed += freed
            self._reclaiming.value = 0
        return freed

    def pending(self) -> int:
        return len(self._limbo)


class _CSubtable:
    __slots__ = ("mask_len", "buckets", "count")

    def __init__(self, mask_len: int):
        self.mask_len = mask_len
        self.buckets = None  # list of NBUCKETS chain heads, allocated on first insert
        self.count = AtomicInt(0)


class ConcurrentSubtableSet:
    """QNS rule tables safe for any number of concurrent readers and writers."""

    def __init__(self, rules: Iterable[NatRule] = ()):
        self.tables = {d: [_CSubtable(m) for m in range(33)] for d in Direction}
        self.flags = {d: AtomicInt(0) for d in Direction}
        self._ids: Dict[int, NatRule] = {}
        self.epochs = EpochManager()
        self.cas_failures = 0
        self.probes = 0
        # test hook: called between reading a link and CAS-ing it
        self.before_cas = None
        for rule in rules:
            self.cas_insert(rule)

    def __len__(self):
        return len(self._ids)

    def __contains__(self, rule_id):
        return rule_id in self._ids

    def rules(self) -> List[NatRule]:
        return list(self._ids.values())

    def flag(self, direction: Direction, mask_len: int) -> int:
        return (self.flags[direction].value >> mask_len) & 1

    # -- chain primitives ----------------------------------------------------

    def _buckets(self, sub: _CSubtable) -> list:
        buckets = sub.buckets
        if buckets is None:
            cas_attr(sub, "buckets", None, [None] * NBUCKETS)
            buckets = sub.buckets
        return buckets

    def _link(self, buckets, idx, pred, expected, new) -> bool:
        if self.before_cas is not None:
            self.before_cas()
        if pred is None:
            ok = cas_item(buckets, idx, expected, new)
        else:
            link = pred.next
            ok = (link[0] is expected and not link[1]
                  and cas_attr(pred, "next", link, (new, False)))
        if not ok:
            self.cas_failures += 1
        return ok

    def _find(self, buckets, idx, key):
        """Return ``(pred, curr)`` with ``curr`` the first live node whose key
        is >= ``key``, unlinking marked nodes met on the way."""
        while True:
            pred = None
            curr = buckets[idx]
            restart = False
            while curr is not None:
                nxt, marked = curr.next
                if marked:
                    if not self._link(buckets, idx, pred, curr, nxt):
                        restart = True
                        break
                    self.epochs.retire(curr)
                    curr = nxt
                    continue
                if curr.key >= key:
                    return pred, curr
                pred = curr
                curr = nxt
            if not restart:
                return pred, None

    # -- writers ---------------------------------------------------------------

    def cas_insert(self, rule: NatRule) -> None:
        if self._ids.setdefault(rule.rule_id, rule) is not rule:
            raise DuplicateRuleId(rule.rule_id)
        sub = self.tables[rule.direction][rule.mask_len]
        buckets = self._buckets(sub)
        slot = self.epochs.slot()
        slot.epoch = self.epochs.epoch.value
        try:
            for proto in rule.probe_protos():
                sub.count.fetch_add(1)
                idx = bucket_hash(rule.prefix, rule.port, proto)
                node = Node(rule)
                while True:
                    pred, curr = self._find(buckets, idx, node.key)
                    node.next = (curr, False)
                    if self._link(buckets, idx, pred, curr, node):
                        break
        finally:
            slot.epoch = None
        self.flags[rule.direction].fetch_or(1 << rule.mask_len)

    def cas_remove(self, rule_id: int) -> NatRule:
        rule = self._ids.pop(rule_id, None)
        if rule is None:
            raise RuleNotFound(rule_id)
        sub = self.tables[rule.direction][rule.mask_len]
        buckets = sub.buckets
        slot = self.epochs.slot()
        slot.epoch = self.epochs.epoch.value
        try:
            for proto in rule.probe_protos():
                idx = bucket_hash(rule.prefix, rule.port, proto)
                self._remove_node(buckets, idx, rule)
                if sub.count.fetch_add(-1) == 1:
                    bit = 1 << rule.mask_len
                    self.flags[rule.direction].fetch_and(~bit)
                    # an insert may have raced the decrement; restore its flag
                    if sub.count.value > 0:
                        self.flags[rule.direction].fetch_or(bit)
        finally:
            slot.epoch = None
        self.epochs.collect()
        return rule

    def _remove_node(self, buckets, idx, rule) -> None:
        key = rule.chain_key
        while True:
            pred, curr = self._find(buckets, idx, key)
            if curr is None or curr.rule is not rule:
                return  # already unlinked by a helper
            link = curr.next
            if link[1]:
                continue
            if self.before_cas is not None:
                self.before_cas()
            if not cas_attr(curr, "next", link, (link[0], True)):
                self.cas_failures += 1
                continue
            if self._link(buckets, idx, pred, curr, link[0]):
                self.epochs.retire(curr)
            else:
                self._find(buckets, idx, key)
            return

    # -- readers ---------------------------------------------------------------

    def cas_lookup(self, direction: Direction, tup: FiveTuple) -> Optional[NatRule]:
        if direction is SNAT:
            ip, port = tup.src_ip, tup.src_port
        else:
            ip, port = tup.dst_ip, tup.dst_port
        proto = tup.proto
        slot = self.epochs.slot()
        slot.epoch = self.epochs.epoch.value
        try:
            bits = self.flags[direction].value
            tables = self.tables[direction]
            while bits:
                m = bits.bit_length() - 1
                bits ^= 1 << m
                buckets = tables[m].buckets
                if buckets is None:
                    continue
                masked = ip & MASKS[m]
                hit = _scan(buckets[bucket_hash(masked, port, proto)], masked, port, proto)
                if hit is None:
                    hit = _scan(buckets[bucket_hash(masked, None, proto)], masked, None, proto)
                if hit is not None:
                    return hit
            return None
        finally:
            slot.epoch = None

    insert = cas_insert
    remove = cas_remove
    lookup = cas_lookup

    def chain(self, direction: Direction, mask_len: int, idx: int) -> List[NatRule]:
        """Live rules of one bucket chain, in chain order."""
        buckets = self.tables[direction][mask_len].buckets
        out = []
        node = buckets[idx] if buckets is not None else None
        while node is not None:
            nxt, marked = node.next
            if not marked:
                out.append(node.rule)
            node = nxt
        return out


def _scan(node, masked, port, proto) -> Optional[NatRule]:
    while node is not None:
        nxt, marked = node.next
        if nxt is _POISON:
            raise TornRead("reached a reclaimed rule node")
        if not marked:
            r = node.rule
            if r is None:
                raise TornRead("rule node reclaimed under a reader")
            if r.prefix == masked and r.port == port and (r.proto == proto or r.proto == ANY):
                return r
        node = nxt
    return None


def cas_insert(tables: ConcurrentSubtableSet, rule: NatRule) -> None:
    tables.cas_insert(rule)


def cas_remove(tables: ConcurrentSubtableSet, rule_id: int) -> NatRule:
    return tables.cas_remove(rule_id)


def cas_lookup(tables: ConcurrentSubtableSet, direction: Direction,
               tup: FiveTuple) -> Optional[NatRule]:
    return tables.cas_lookup(direction, tup)
