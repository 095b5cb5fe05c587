"""
The NAT dataplane: per-worker polling loops around conntrack, rule lookup,
address allocation and in-place rewriting.

Each worker owns an input ring, an output ring, a connection table, a
mailbox and its stripes of every target pool.  The rule table is the one
object shared by all workers.  The dispatcher plays the NIC: it hashes each
frame with RSS and appends it to the owning worker's ring; the collector
merges the output rings back into input order.

Two executors are available.  ``"thread"`` runs workers as threads of this
process and supports repeated :meth:`Engine.run` calls over persistent
state.  ``"process"`` forks one process per worker for real parallelism
under the GIL; it is single-shot and is what the scaling benchmark uses on
multi-core machines.
"""

import json
import logging
import multiprocessing
import os
import queue
import sys
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, Iterable, List, Optional

from . import packet
from .conntrack import (DEFAULT_CAPACITY, DEFAULT_IDLE_TIMEOUT,
                        DEFAULT_MAILBOX_CAPACITY, ConnEntry, Flow,
                        LocalConnTable, Mailbox, MailboxFull, TableFull,
                        make_entry_pair)
from .lockfree import AtomicInt, ConcurrentSubtableSet
from .packet import ParseError, parse_packet, rewrite_tuple
from .pool import PoolExhausted, PoolState
from .rss import INDIRECTION_SIZE, RssConfig
from .rules import DNAT, SNAT, LinearRuleList, NatRule, SubtableSet, TargetPool

log = logging.getLogger(__name__)

DEFAULT_BATCH = 32
DEFAULT_RING_CAPACITY = 1 << 14

NO_RULE = "no_rule"
POOL_EXHAUSTED = "pool_exhausted"
PARSE = "parse"
TABLE_FULL = "table_full"
MAILBOX_FULL = "mailbox_full"


class ConfigError(ValueError):
    pass


@dataclass
class Counters:
    rx: int = 0
    tx: int = 0
    dropped_no_rule: int = 0
    dropped_pool_exhausted: int = 0
    dropped_parse: int = 0
    dropped_table_full: int = 0
    dropped_mailbox_full: int = 0
    new_flows: int = 0
    ct_hits: int = 0
    copies_performed: int = 0
    entries_dropped_full: int = 0
    t_conntrack_ns: int = 0
    t_lookup_ns: int = 0
    t_rewrite_ns: int = 0

    @property
    def dropped(self) -> int:
        return (self.dropped_no_rule + self.dropped_pool_exhausted
                + self.dropped_parse + self.dropped_table_full
                + self.dropped_mailbox_full)

    def balanced(self) -> bool:
        return self.rx == self.tx + self.dropped

    def add(self, other: "Counters") -> "Counters":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    @classmethod
    def total(cls, parts: Iterable["Counters"]) -> "Counters":
        out = cls()
        for p in parts:
            out.add(p)
        return out


@dataclass
class RunReport:
    nworkers: int
    counters: Counters
    per_worker: List[Counters]
    wall_time: float
    rx_bytes: int = 0
    executor: str = "thread"

    @property
    def pps(self) -> float:
        return self.counters.rx / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def bps(self) -> float:
        return self.rx_bytes * 8 / self.wall_time if self.wall_time > 0 else 0.0

    def as_dict(self) -> dict:
        d = {"nworkers": self.nworkers, "executor": self.executor,
             "wall_time": self.wall_time, "rx_bytes": self.rx_bytes,
             "pps": self.pps, "bps": self.bps}
        d.update(asdict(self.counters))
        d["dropped"] = self.counters.dropped
        d["per_worker"] = [asdict(c) for c in self.per_worker]
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def to_csv(self) -> str:
        d = self.as_dict()
        del d["per_worker"]
        keys = list(d)
        return ",".join(keys) + "\n" + ",".join(str(d[k]) for k in keys) + "\n"

    def summary(self) -> str:
        c = self.counters
        return (f"workers={self.nworkers} rx={c.rx} tx={c.tx} dropped={c.dropped} "
                f"new_flows={c.new_flows} ct_hits={c.ct_hits} "
                f"pps={self.pps:.0f} wall={self.wall_time:.3f}s")


@dataclass
class EngineConfig:
    nworkers: int = 1
    rss: Optional[RssConfig] = None
    passthrough: bool = False
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    batch: int = DEFAULT_BATCH
    table_capacity: int = DEFAULT_CAPACITY
    mailbox_capacity: int = DEFAULT_MAILBOX_CAPACITY
    ring_capacity: int = DEFAULT_RING_CAPACITY
    pool_stripes: Optional[int] = None
    lookup: str = "qns"
    stage_timing: bool = False
    idle_pause: float = 50e-6
    expiry_interval: float = 1.0
    expiry_budget: int = 4096

    def __post_init__(self):
        if self.nworkers < 1:
            raise ConfigError("nworkers must be >= 1")
        if self.rss is None:
            self.rss = RssConfig(nworkers=self.nworkers)
        elif self.rss.nworkers != self.nworkers:
            raise ConfigError("RSS config worker count differs from nworkers")
        if self.batch < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lookup not in ("qns", "linear", "serial"):
            raise ConfigError(f"unknown lookup {self.lookup!r}")
        if self.pool_stripes is None:
            self.pool_stripes = self.nworkers
            if self.stripe_owners() is None:
                self.pool_stripes = INDIRECTION_SIZE
        if self.stripe_owners() is None:
            raise ConfigError(f"{self.pool_stripes} pool stripes do not map onto "
                              "the RSS indirection table one worker per stripe")

    def stripe_owners(self) -> Optional[List[int]]:
        """Worker owning each pool stripe, or None if a stripe would be shared.

        A flow allocates from stripe ``rss_bucket % pool_stripes``, so all
        indirection entries congruent modulo the stripe count must name the
        same worker.
        """
        n = self.pool_stripes
        if n < 1:
            return None
        owners = [None] * n
        for i, w in enumerate(self.rss.indirection):
            s = i % n
            if owners[s] is None:
                owners[s] = w
            elif owners[s] != w:
                return None
        return [0 if w is None else w for w in owners]


def build_rule_table(rules: Iterable[NatRule], kind: str = "qns"):
    if kind == "qns":
        return ConcurrentSubtableSet(rules)
    if kind == "serial":
        return SubtableSet(rules)
    return LinearRuleList(rules)


class Worker:
    """Per-worker context: rings, connection table, mailbox, pool stripes."""

    def __init__(self, wid: int, cfg: EngineConfig, rules, mailboxes,
                 stripe_owners: List[int]):
        self.wid = wid
        self.cfg = cfg
        self.rules = rules
        self.mailboxes = mailboxes
        self.mailbox = mailboxes[wid]
        self.table = LocalConnTable(wid, cfg.table_capacity)
        self.counters = Counters()
        self.input = deque()
        self.output = []
        self.rx_bytes = 0
        self._owned_stripes = [s for s, w in enumerate(stripe_owners) if w == wid]
        self.pools: Dict[TargetPool, Dict[int, PoolState]] = {}
        self._last_expiry = None
        self._lookup = rules.lookup
        self._rss = cfg.rss

    def pool_for(self, target: TargetPool, stripe: int) -> PoolState:
        stripes = self.pools.get(target)
        if stripes is None:
            stripes = self.pools[target] = {
                s: PoolState(target, self.cfg.pool_stripes, [s]) for s in self._owned_stripes}
        return stripes[stripe]

    def live_allocations(self) -> int:
        return sum(p.live for stripes in self.pools.values() for p in stripes.values())

    def drain(self) -> int:
        entries = self.mailbox.take_all()
        table = self.table
        for entry in entries:
            try:
                table.insert(entry)
            except TableFull:
                self.counters.entries_dropped_full += 1
        return len(entries)

    def process_packet(self, buf, now: float) -> Optional[str]:
        """Translate ``buf`` in place.  Returns None to emit, else a drop reason."""
        c = self.counters
        timing = self.cfg.stage_timing
        if timing:
            t0 = time.perf_counter_ns()
        try:
            view = parse_packet(buf)
        except ParseError:
            c.dropped_parse += 1
            return PARSE
        tup = view.tuple
        entry = self.table.lookup(tup, now)
        if timing:
            t1 = time.perf_counter_ns()
            c.t_conntrack_ns += t1 - t0
        if entry is not None:
            c.ct_hits += 1
            rewrite_tuple(buf, view, entry.new_src, entry.new_dst)
            if timing:
                c.t_rewrite_ns += time.perf_counter_ns() - t1
            return None

        lookup = self._lookup
        dnat = lookup(DNAT, tup)
        snat = lookup(SNAT, tup)
        if timing:
            t2 = time.perf_counter_ns()
            c.t_lookup_ns += t2 - t1
        if dnat is None and snat is None:
            if self.cfg.passthrough:
                return None
            c.dropped_no_rule += 1
            return NO_RULE

        stripe = self._rss.bucket_for_tuple(tup) % self.cfg.pool_stripes
        allocs = []
        new_src = new_dst = None
        try:
            if dnat is not None:
                pool = self.pool_for(dnat.target, stripe)
                new_dst = pool.allocate(tup, DNAT)
                allocs.append((pool, new_dst, tup))
            if snat is not None:
                mid = tup.rewritten(None, new_dst)
                pool = self.pool_for(snat.target, stripe)
                new_src = pool.allocate(mid, SNAT)
                allocs.append((pool, new_src, mid))
        except PoolExhausted:
            _release(allocs)
            c.dropped_pool_exhausted += 1
            return POOL_EXHAUSTED

        flow = Flow.new(now)
        flow.allocations = allocs
        fwd, rev = make_entry_pair(tup, new_src, new_dst, self._rss.core_for_tuple,
                                   now, flow)
        local_rev = rev.owner_worker == self.wid
        if self.table.room() < 1 + local_rev:
            _release(allocs)
            c.dropped_table_full += 1
            return TABLE_FULL
        # the reply entry is placed before the forward packet can leave
        if local_rev:
            self.table.insert(rev)
        else:
            try:
                self.mailboxes[rev.owner_worker].post(rev)
            except MailboxFull:
                _release(allocs)
                c.dropped_mailbox_full += 1
                return MAILBOX_FULL
        self.table.insert(fwd)
        c.new_flows += 1
        rewrite_tuple(buf, view, new_src, new_dst)
        if timing:
            c.t_rewrite_ns += time.perf_counter_ns() - t2
        return None

    def poll(self, clock: Optional[Callable[[], float]] = None) -> int:
        """Process up to one batch from the input ring; returns packets taken."""
        ring = self.input
        if not ring:
            return 0
        c = self.counters
        out = self.output
        copies_before = packet.copy_count()
        n = 0
        now = None
        for _ in range(min(self.cfg.batch, len(ring))):
            seq, ts_us, buf = ring.popleft()
            n += 1
            c.rx += 1
            self.rx_bytes += len(buf)
            now = clock() if clock is not None else ts_us / 1e6
            if self.process_packet(buf, now) is None:
                c.tx += 1
                out.append((seq, ts_us, buf))
        c.copies_performed += packet.copy_count() - copies_before
        self.maybe_expire(now)
        return n

    def maybe_expire(self, now: Optional[float]) -> None:
        if now is None:
            return
        if self._last_expiry is None:
            self._last_expiry = now
        elif now - self._last_expiry >= self.cfg.expiry_interval:
            self._last_expiry = now
            self.table.expire(now, self.cfg.idle_timeout, self.cfg.expiry_budget)

    def loop(self, input_closed: threading.Event, stop: threading.Event,
             done: AtomicInt, clock=None) -> None:
        """Busy-poll until the input is closed and every worker is finished."""
        finished = False
        nworkers = self.cfg.nworkers
        pause = self.cfg.idle_pause
        while True:
            self.drain()
            if self.poll(clock):
                if stop.is_set():
                    break
                continue
            if stop.is_set():
                break
            if input_closed.is_set() and not self.input:
                if not finished:
                    finished = True
                    done.fetch_add(1)
                if done.value >= nworkers:
                    self.drain()
                    break
            if pause:
                time.sleep(pause)
        self.drain()


def _release(allocs) -> None:
    for pool, pair, key in allocs:
        pool.release(pair, key)


def dispatch_core(rss: RssConfig, buf) -> int:
    try:
        return rss.core_for_tuple(parse_packet(buf).tuple)
    except ParseError:
        return 0


class Engine:
    """A multi-worker NAT dataplane with state persisting across runs."""

    def __init__(self, rules: Iterable[NatRule], config: Optional[EngineConfig] = None,
                 **kwargs):
        self.cfg = config if config is not None else EngineConfig(**kwargs)
        self.rules = build_rule_table(rules, self.cfg.lookup)
        owners = self.cfg.stripe_owners()
        n = self.cfg.nworkers
        self.mailboxes = [Mailbox(self.cfg.mailbox_capacity) for _ in range(n)]
        self.workers = [Worker(w, self.cfg, self.rules, self.mailboxes, owners)
                        for w in range(n)]
        self.stop_event = threading.Event()
        self.stats_interval: Optional[float] = None
        self.stats_stream = sys.stderr

    @property
    def nworkers(self) -> int:
        return self.cfg.nworkers

    def counters(self) -> Counters:
        return Counters.total(w.counters for w in self.workers)

    def conn_entries(self) -> int:
        return sum(len(w.table) for w in self.workers)

    def live_allocations(self) -> int:
        return sum(w.live_allocations() for w in self.workers)

    def expire(self, now: float, idle_timeout: Optional[float] = None) -> int:
        """Full expiry scan of every table; only call while no run is active."""
        timeout = self.cfg.idle_timeout if idle_timeout is None else idle_timeout
        for w in self.workers:
            w.drain()
        return sum(w.table.expire(now, timeout) for w in self.workers)

    def stop(self) -> None:
        self.stop_event.set()

    def _stats_line(self) -> str:
        c = self.counters()
        return f"rx={c.rx} tx={c.tx} dropped={c.dropped} new_flows={c.new_flows}"

    def run(self, source: Iterable, sink: Optional[Callable] = None,
            prefill: bool = False, clock=None) -> RunReport:
        """Push ``(ts_us, frame)`` records through the workers.

        Emitted frames are passed to ``sink(ts_us, frame)`` in input order.
        With ``prefill`` every frame is steered into the rings before the
        workers start, so the wall time covers packet processing only.
        """
        before = [Counters().add(w.counters) for w in self.workers]
        bytes_before = [w.rx_bytes for w in self.workers]
        for w in self.workers:
            w.output = []
        rss = self.cfg.rss
        rings = [w.input for w in self.workers]
        input_closed = threading.Event()
        done = AtomicInt(0)
        self.stop_event.clear()

        seq = 0
        if prefill:
            for ts_us, buf in source:
                rings[dispatch_core(rss, buf)].append((seq, ts_us, buf))
                seq += 1
            input_closed.set()

        threads = [threading.Thread(target=w.loop, name=f"nat-worker-{w.wid}",
                                    args=(input_closed, self.stop_event, done, clock),
                                    daemon=True) for w in self.workers]
        t_start = time.perf_counter()
        for t in threads:
            t.start()
        if not prefill:
            cap = self.cfg.ring_capacity
            next_stats = t_start + (self.stats_interval or 0)
            for ts_us, buf in source:
                if self.stop_event.is_set():
                    break
                ring = rings[dispatch_core(rss, buf)]
                while len(ring) >= cap and not self.stop_event.is_set():
                    time.sleep(self.cfg.idle_pause or 1e-5)
                ring.append((seq, ts_us, buf))
                seq += 1
                if self.stats_interval and time.perf_counter() >= next_stats:
                    print(self._stats_line(), file=self.stats_stream)
                    next_stats += self.stats_interval
            input_closed.set()
        for t in threads:
            t.join()
        wall = time.perf_counter() - t_start

        merged = sorted((item for w in self.workers for item in w.output),
                        key=lambda item: item[0])
        if sink is not None:
            for _, ts_us, buf in merged:
                sink(ts_us, buf)
        per_worker = []
        for w, b in zip(self.workers, before):
            delta = Counters().add(w.counters)
            for f in fields(delta):
                setattr(delta, f.name, getattr(delta, f.name) - getattr(b, f.name))
            per_worker.append(delta)
        rx_bytes = sum(w.rx_bytes - b for w, b in zip(self.workers, bytes_before))
        if self.stats_interval:
            print(self._stats_line(), file=self.stats_stream)
        return RunReport(self.nworkers, Counters.total(per_worker), per_worker,
                         wall, rx_bytes, "thread")


def process_packet(ctx: Worker, buf, now: float) -> Optional[str]:
    return ctx.process_packet(buf, now)


# -- process executor ----------------------------------------------------------

class _ProcessMailbox:
    """Mailbox over a multiprocessing queue, flushed once per batch.

    ``sent`` is a shared ``n*n`` array; cell ``src*n + dst`` counts batches
    ``src`` has put towards ``dst``, so a finishing worker knows how many
    batches it still has to wait for.
    """

    def __init__(self, queue, src, dst, sent, nworkers):
        self.queue = queue
        self.pending = []
        self._cell = src * nworkers + dst
        self._sent = sent
        self._inbound = [s * nworkers + dst for s in range(nworkers)]
        self.received = 0

    def post(self, entry: ConnEntry) -> None:
        # pool back-references stay in the process holding the ORIGINAL entry
        light = Flow(entry.flow.flow_id, entry.flow.last_seen)
        self.pending.append(ConnEntry(entry.match_tuple, entry.new_src, entry.new_dst,
                                      entry.direction, entry.owner_worker, light,
                                      entry.last_seen))

    def flush(self) -> None:
        if self.pending:
            self.queue.put(self.pending)
            self.pending = []
            self._sent[self._cell] += 1

    def expected(self) -> int:
        return sum(self._sent[c] for c in self._inbound)

    def take_all(self, wait: bool = False):
        out = []
        while True:
            try:
                if wait and self.received < self.expected():
                    batch = self.queue.get(timeout=5.0)
                else:
                    batch = self.queue.get_nowait()
            except queue.Empty:
                return out
            self.received += 1
            out.extend(batch)


def _process_worker(worker: Worker, start, done, results) -> None:
    nworkers = worker.cfg.nworkers
    outboxes = worker.mailboxes
    start.wait()
    t0 = time.perf_counter()
    finished = False
    while True:
        worker.drain()
        n = worker.poll()
        for m in outboxes:
            m.flush()
        if n:
            continue
        if not finished:
            finished = True
            with done.get_lock():
                done.value += 1
        if done.value >= nworkers:
            table = worker.table
            for entry in worker.mailbox.take_all(wait=True):
                try:
                    table.insert(entry)
                except TableFull:
                    worker.counters.entries_dropped_full += 1
            break
        time.sleep(worker.cfg.idle_pause or 1e-5)
    t1 = time.perf_counter()
    results.put((worker.wid, t0, t1, worker.counters, worker.rx_bytes,
                 [(s, ts, bytes(b)) for s, ts, b in worker.output]))


def _run_processes(rules, cfg: EngineConfig, source, sink) -> RunReport:
    ctx = multiprocessing.get_context("fork")
    n = cfg.nworkers
    table = build_rule_table(rules, cfg.lookup)
    queues = [ctx.Queue() for _ in range(n)]
    sent = ctx.Array("i", n * n, lock=False)
    owners = cfg.stripe_owners()
    workers = []
    for w in range(n):
        boxes = [_ProcessMailbox(queues[d], w, d, sent, n) for d in range(n)]
        workers.append(Worker(w, cfg, table, boxes, owners))
    for seq, (ts_us, buf) in enumerate(source):
        workers[dispatch_core(cfg.rss, buf)].input.append((seq, ts_us, buf))
    start = ctx.Event()
    done = ctx.Value("i", 0)
    results = ctx.Queue()
    procs = [ctx.Process(target=_process_worker, args=(w, start, done, results),
                         daemon=True) for w in workers]
    for p in procs:
        p.start()
    start.set()
    got = [results.get() for _ in procs]
    for p in procs:
        p.join()
    got.sort(key=lambda r: r[0])
    wall = max(r[2] for r in got) - min(r[1] for r in got)
    per_worker = [r[3] for r in got]
    if sink is not None:
        merged = sorted((item for r in got for item in r[5]), key=lambda i: i[0])
        for _, ts_us, buf in merged:
            sink(ts_us, bytearray(buf))
    return RunReport(n, Counters.total(per_worker), per_worker, wall,
                     sum(r[4] for r in got), "process")


def default_executor(nworkers: int) -> str:
    return "process" if nworkers > 1 and (os.cpu_count() or 1) > 1 else "thread"


def run_engine(nworkers: int, rss_cfg: Optional[RssConfig], rules: Iterable[NatRule],
               source: Iterable, sink: Optional[Callable] = None,
               executor: str = "thread", prefill: bool = False,
               **options) -> RunReport:
    """Build an engine, run ``source`` through it once and report."""
    cfg = EngineConfig(nworkers=nworkers, rss=rss_cfg, **options)
    if executor == "process":
        return _run_processes(list(rules), cfg, source, sink)
    if executor != "thread":
        raise ConfigError(f"unknown executor {executor!r}")
    return Engine(rules, cfg).run(source, sink, prefill=prefill)
