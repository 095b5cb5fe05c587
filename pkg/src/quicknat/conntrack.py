"""
Per-worker connection tracking.

Every translated flow is recorded twice: an ORIGINAL entry matching packets
as the flow's initiator sends them and a REPLY entry matching the translated
flow's reverse.  Each entry lives in the table of the worker the NIC steers
its ``match_tuple`` to.  When that is another worker, the creating worker
posts the entry to the owner's mailbox instead of writing the owner's table,
so every table has exactly one writer.
"""

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .lockfree import AtomicInt
from .packet import Endpoint, FiveTuple

ORIGINAL = "original"
REPLY = "reply"

DEFAULT_CAPACITY = 1 << 20
DEFAULT_IDLE_TIMEOUT = 300.0
DEFAULT_MAILBOX_CAPACITY = 1 << 16

_flow_ids = itertools.count(1)


class TableFull(Exception):
    pass


class MailboxFull(Exception):
    pass


@dataclass(eq=False)
class Flow:
    """State shared by the two entries of one flow.

    ``last_seen`` is a single word written by whichever worker last saw a
    packet of the flow in either direction; expiry of both entries keys off
    it, so traffic in one direction keeps the other alive.
    """

    flow_id: int
    last_seen: float
    # (PoolState, pair, flow key) per allocation, released on expiry by
    # the worker owning the ORIGINAL entry
    allocations: List[tuple] = field(default_factory=list)

    @classmethod
    def new(cls, now: float) -> "Flow":
        return cls(next(_flow_ids), now)

    def release(self) -> None:
        for pool, pair, key in self.allocations:
            pool.release(pair, key)
        self.allocations = []


@dataclass(eq=False)
class ConnEntry:
    match_tuple: FiveTuple
    new_src: Optional[Endpoint]
    new_dst: Optional[Endpoint]
    direction: str
    owner_worker: int
    flow: Flow
    last_seen: float = 0.0

    @property
    def flow_id(self) -> int:
        return self.flow.flow_id

    @property
    def holds_allocation(self) -> bool:
        return self.direction == ORIGINAL

    def translated(self) -> FiveTuple:
        return self.match_tuple.rewritten(self.new_src, self.new_dst)


def make_entry_pair(tup: FiveTuple, new_src: Optional[Endpoint],
                    new_dst: Optional[Endpoint], owner_of, now: float,
                    flow: Optional[Flow] = None):
    """Build the mutually inverse ORIGINAL/REPLY entries for a new flow.

    ``owner_of`` maps a tuple to the worker that receives it.
    """
    flow = flow or Flow.new(now)
    translated = tup.rewritten(new_src, new_dst)
    reply_match = translated.reverse()
    reply_src = (tup.dst_ip, tup.dst_port) if new_dst is not None else None
    reply_dst = (tup.src_ip, tup.src_port) if new_src is not None else None
    fwd = ConnEntry(tup, new_src, new_dst, ORIGINAL, owner_of(tup), flow, now)
    rev = ConnEntry(reply_match, reply_src, reply_dst, REPLY,
                    owner_of(reply_match), flow, now)
    return fwd, rev


class LocalConnTable:
    """Connection table owned and mutated by a single worker."""

    def __init__(self, worker: int = 0, capacity: int = DEFAULT_CAPACITY):
        self.worker = worker
        self.capacity = capacity
        self.entries: Dict[FiveTuple, ConnEntry] = {}
        self._scan = None
        self.dropped_full = 0
        self.evicted = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, tup):
        return tup in self.entries

    def lookup(self, tup: FiveTuple, now: float) -> Optional[ConnEntry]:
        entry = self.entries.get(tup)
        if entry is not None:
            entry.last_seen = now
            if now > entry.flow.last_seen:
                entry.flow.last_seen = now
        return entry

    def room(self) -> int:
        return self.capacity - len(self.entries)

    def insert(self, entry: ConnEntry) -> None:
        if entry.owner_worker != self.worker:
            raise ValueError(f"entry for worker {entry.owner_worker} offered to {self.worker}")
        entries = self.entries
        old = entries.get(entry.match_tuple)
        if old is None and len(entries) >= self.capacity:
            raise TableFull(f"worker {self.worker} table holds {self.capacity} entries")
        entries[entry.match_tuple] = entry

    def expire(self, now: float, idle_timeout: float,
               budget: Optional[int] = None) -> int:
        """Evict entries whose flow has been idle longer than ``idle_timeout``.

        With a ``budget`` only that many entries are examined, continuing
        where the previous call stopped.
        """
        if budget is None:
            keys = list(self.entries)
        else:
            if not self._scan:
                self._scan = deque(self.entries)
            keys = [self._scan.popleft() for _ in range(min(budget, len(self._scan)))]
        evicted = 0
        for key in keys:
            entry = self.entries.get(key)
            if entry is None:
                continue
            if now - max(entry.last_seen, entry.flow.last_seen) > idle_timeout:
                del self.entries[key]
                if entry.holds_allocation:
                    entry.flow.release()
                evicted += 1
        self.evicted += evicted
        return evicted


class Mailbox:
    """Bounded multi-producer, single-consumer queue of entries.

    ``deque.append``/``popleft`` are atomic in CPython; capacity is reserved
    with a CAS loop on a counter so concurrent producers can't overshoot it.
    """

    def __init__(self, capacity: int = DEFAULT_MAILBOX_CAPACITY):
        self.capacity = capacity
        self._q = deque()
        self._size = AtomicInt(0)

    def __len__(self):
        return self._size.value

    def post(self, entry: ConnEntry) -> None:
        size = self._size
        while True:
            cur = size.value
            if cur >= self.capacity:
                raise MailboxFull(f"mailbox holds {self.capacity} entries")
            if size.compare_and_set(cur, cur + 1):
                break
        self._q.append(entry)

    def take_all(self) -> List[ConnEntry]:
        q = self._q
        out = []
        while q:
            out.append(q.popleft())
        if out:
            self._size.fetch_add(-len(out))
        return out


def ct_lookup(table: LocalConnTable, tup: FiveTuple, now: float) -> Optional[ConnEntry]:
    return table.lookup(tup, now)


def ct_insert_local(table: LocalConnTable, entry: ConnEntry) -> None:
    table.insert(entry)


def ct_post_remote(mailboxes, entry: ConnEntry) -> None:
    mailboxes[entry.owner_worker].post(entry)


def ct_drain(table: LocalConnTable, mailbox: Mailbox, now: float = 0.0) -> int:
    """Install every queued entry; returns how many entries were taken.

    Entries that do not fit are dropped and counted in ``table.dropped_full``.
    """
    entries = mailbox.take_all()
    for entry in entries:
        try:
            table.insert(entry)
        except TableFull:
            table.dropped_full += 1
    return len(entries)


def ct_expire(table: LocalConnTable, now: float,
              idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> int:
    return table.expire(now, idle_timeout)
