import random
import sys
import threading

import pytest
from hypothesis import given, settings, strategies as st

from conftest import FLOW, POOL
from quicknat.lockfree import (AtomicInt, ConcurrentSubtableSet, EpochManager, Node,
                               TornRead, _scan, cas_insert, cas_lookup, cas_remove)
from quicknat.packet import TCP, UDP, FiveTuple
from quicknat.rules import ANY, DNAT, SNAT, NatRule, RuleNotFound, SubtableSet


def disjoint_rules(start, count, seed=0):
    """SNAT /32 exact-port rules on distinct addresses, plus the probe each one answers."""
    rng = random.Random(seed)
    out = []
    for i in range(start, start + count):
        ip = (10 << 24) + i
        port = rng.choice([None, 80])
        r = NatRule.make(SNAT, ip, 32, port, rng.choice([TCP, ANY]), POOL, rule_id=i)
        out.append((r, FiveTuple(ip, 1, 80, 2, TCP)))
    return out


@pytest.fixture
def fine_switching():
    old = sys.getswitchinterval()
    sys.setswitchinterval(1e-5)
    yield
    sys.setswitchinterval(old)


def test_atomic_int():
    a = AtomicInt(5)
    assert a.compare_and_set(5, 6) and not a.compare_and_set(5, 7)
    assert a.fetch_add(2) == 6 and a.get() == 8
    assert a.fetch_or(1) == 8 and a.fetch_and(~8) == 9 and a.get() == 1


def test_example_flow(snat24):
    t = ConcurrentSubtableSet([snat24])
    assert cas_lookup(t, SNAT, FLOW) is snat24
    assert t.flag(SNAT, 24) == 1
    cas_remove(t, snat24.rule_id)
    assert cas_lookup(t, SNAT, FLOW) is None and t.flag(SNAT, 24) == 0
    with pytest.raises(RuleNotFound):
        cas_remove(t, snat24.rule_id)


op_st = st.lists(st.tuples(st.sampled_from(["ins", "del"]), st.integers(0, 15),
                           st.sampled_from([SNAT, DNAT]), st.sampled_from([24, 28, 32]),
                           st.none() | st.just(80), st.sampled_from([TCP, UDP, ANY])),
                 max_size=40)


@settings(max_examples=150, deadline=None)
@given(op_st)
def test_single_thread_matches_serial(ops):
    serial, conc = SubtableSet(), ConcurrentSubtableSet()
    for kind, i, d, m, port, proto in ops:
        if kind == "ins":
            r = NatRule.make(d, (10 << 24) | (i << 4), m, port, proto, POOL, rule_id=i)
            if i in serial:
                continue
            serial.insert(r)
            conc.insert(r)
        elif i in serial:
            assert serial.remove(i) == conc.remove(i)
        for dd in (SNAT, DNAT):
            for mm in (24, 28, 32):
                assert serial.flag(dd, mm) == conc.flag(dd, mm)
        for x in range(0, 16, 3):
            for pr in (TCP, UDP):
                tup = FiveTuple((10 << 24) | (x << 4), (10 << 24) | (x << 4), 80, 80, pr)
                for dd in (SNAT, DNAT):
                    assert serial.lookup(dd, tup) == conc.lookup(dd, tup)


def test_chain_order_by_insert_seq():
    a = NatRule.make(SNAT, "192.168.88.0", 24, None, TCP, POOL, rule_id=2, insert_seq=5)
    b = NatRule.make(SNAT, "192.168.88.0", 24, None, TCP, POOL, rule_id=1, insert_seq=9)
    t = ConcurrentSubtableSet([b, a])
    assert t.chain(SNAT, 24, 0x2117) == [a, b]


def test_cas_retry_on_interference():
    """A competing insert between read and CAS makes the first CAS fail and retry."""
    t = ConcurrentSubtableSet()
    a = NatRule.make(SNAT, "192.168.88.0", 24, None, TCP, POOL, rule_id=1)
    b = NatRule.make(SNAT, "192.168.88.0", 24, None, TCP, POOL, rule_id=2)
    fired = []

    def interfere():
        if not fired:
            fired.append(1)
            t.before_cas = None
            t.insert(a)
            t.before_cas = interfere
    t.before_cas = interfere
    t.insert(b)
    assert t.cas_failures >= 1
    assert t.chain(SNAT, 24, 0x2117) == [a, b]


def test_epoch_defers_reclaim_while_reader_active():
    em = EpochManager()
    r = NatRule.make(SNAT, "10.0.0.0", 8, None, TCP, POOL)
    node = Node(r)
    reader = em.slot()
    reader.epoch = em.epoch.value        # reader pinned in the current epoch
    em.retire(node)
    for _ in range(5):
        em.collect()
    assert node.rule is r and em.pending() == 1
    reader.epoch = None
    for _ in range(3):
        em.collect()
    assert node.rule is None and em.pending() == 0


def test_reclaimed_node_detected_as_torn():
    r = NatRule.make(SNAT, "10.0.0.0", 8, None, TCP, POOL)
    node = Node(r)
    em = EpochManager()
    em.retire(node)
    for _ in range(3):
        em.collect()
    with pytest.raises(TornRead):
        _scan(node, r.prefix, None, TCP)


def _stress(writers, per_writer, readers, min_lookups, remove=False):
    table = ConcurrentSubtableSet()
    batches = [disjoint_rules(w * per_writer, per_writer, seed=w) for w in range(writers)]
    errors, lookups = [], [0] * readers
    writers_done = threading.Event()

    def write(batch):
        try:
            for r, _ in batch:
                cas_insert(table, r)
            if remove:
                for r, _ in batch[::2]:
                    cas_remove(table, r.rule_id)
        except Exception as exc:   # pragma: no cover - reported below
            errors.append(exc)

    probes = [p for b in batches for p in b]

    def read(k):
        rng = random.Random(k)
        n = 0
        try:
            while not writers_done.is_set() or n < min_lookups // readers:
                r, tup = probes[rng.randrange(len(probes))]
                got = cas_lookup(table, SNAT, tup)
                if got is not None and got is not r:
                    errors.append(AssertionError(f"{tup} -> {got}, expected {r} or None"))
                n += 1
        except Exception as exc:
            errors.append(exc)
        lookups[k] = n

    ws = [threading.Thread(target=write, args=(b,)) for b in batches]
    rs = [threading.Thread(target=read, args=(k,)) for k in range(readers)]
    for t in rs + ws:
        t.start()
    for t in ws:
        t.join()
    writers_done.set()
    for t in rs:
        t.join()
    return table, batches, errors, sum(lookups)


def test_one_writer_four_readers(fine_switching):
    table, batches, errors, n = _stress(1, 1000, 4, 20_000)
    assert not errors
    for r, tup in batches[0]:
        assert cas_lookup(table, SNAT, tup) is r


def test_two_writers_union(fine_switching):
    table, batches, errors, _ = _stress(2, 1000, 2, 5000)
    assert not errors
    assert len(table) == 2000
    for b in batches:
        for r, tup in b:
            assert cas_lookup(table, SNAT, tup) is r


def test_concurrent_removal(fine_switching):
    table, batches, errors, _ = _stress(2, 500, 3, 5000, remove=True)
    assert not errors
    for b in batches:
        for i, (r, tup) in enumerate(b):
            assert cas_lookup(table, SNAT, tup) is (None if i % 2 == 0 else r)
    assert table.epochs.retired > 0
