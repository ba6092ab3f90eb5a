import os
import struct
import threading

import pytest
from hypothesis import given, settings, strategies as st

from userbpf import maps, shm


def k64(n):
    return struct.pack("<Q", n)


def k32(n):
    return struct.pack("<I", n)


class TestDescriptors:
    def test_ringbuf_capacity_must_be_pow2(self, seg_name):
        desc = maps.MapDescriptor("ringbuf", 0, 0, 3000, "rb", seg_name())
        with pytest.raises(maps.InvalidDescriptor):
            maps.Map.create(desc)

    def test_array_key_must_be_4(self, seg_name):
        desc = maps.MapDescriptor("array", 8, 8, 4, "a", seg_name())
        with pytest.raises(maps.InvalidDescriptor):
            maps.Map.create(desc)

    def test_name_too_long(self, seg_name):
        desc = maps.MapDescriptor("hash", 8, 8, 4, "x" * 17, seg_name())
        with pytest.raises(maps.InvalidDescriptor):
            maps.Map.create(desc)

    def test_segment_collision(self, seg_name):
        n = seg_name()
        maps.Map.create(maps.MapDescriptor("hash", 8, 8, 4, "a", n)).close()
        with pytest.raises(shm.SegmentExists):
            maps.Map.create(maps.MapDescriptor("hash", 8, 8, 4, "b", n))
        shm.Segment.unlink(n)

    def test_open_rebuilds_descriptor(self, make_map):
        m = make_map("hash", key_size=4, value_size=12, max_entries=33,
                     name="stats")
        again = maps.Map.open(m.desc.segment_name)
        assert again.desc == m.desc
        again.close()


class TestHashMap:
    def test_fresh_lookup_misses(self, make_map):
        m = make_map("hash")
        assert m.lookup(k64(1)) is None

    def test_update_lookup_roundtrip(self, make_map):
        m = make_map("hash")
        m.update(k64(1), k64(42))
        assert m.lookup(k64(1)) == k64(42)

    def test_flags(self, make_map):
        m = make_map("hash")
        m.update(k64(5), k64(1), maps.NOEXIST)
        with pytest.raises(maps.KeyExists):
            m.update(k64(5), k64(2), maps.NOEXIST)
        with pytest.raises(maps.KeyAbsent):
            m.update(k64(6), k64(2), maps.EXIST)
        m.update(k64(5), k64(3), maps.EXIST)
        assert m.lookup(k64(5)) == k64(3)

    def test_delete(self, make_map):
        m = make_map("hash")
        m.update(k64(9), k64(1))
        m.delete(k64(9))
        assert m.lookup(k64(9)) is None
        with pytest.raises(maps.KeyAbsent):
            m.delete(k64(9))

    def test_table_full_at_max_entries(self, make_map):
        m = make_map("hash", max_entries=16)
        for i in range(16):
            m.update(k64(i), k64(i))
        with pytest.raises(maps.TableFull):
            m.update(k64(999), k64(0))
        # replacing an existing key is still allowed
        m.update(k64(3), k64(33))
        assert m.lookup(k64(3)) == k64(33)

    def test_bad_key_size(self, make_map):
        m = make_map("hash")
        with pytest.raises(maps.BadKeySize):
            m.lookup(b"\x01")
        with pytest.raises(maps.BadValueSize):
            m.update(k64(1), b"\x01")

    def test_reuses_tombstones(self, make_map):
        m = make_map("hash", max_entries=8)
        for round_ in range(50):
            for i in range(8):
                m.update(k64(i), k64(round_))
            for i in range(8):
                m.delete(k64(i))
        assert m.keys() == []

    def test_iteration_visits_every_key_once(self, make_map):
        m = make_map("hash", max_entries=64)
        expect = set()
        for i in range(40):
            m.update(k64(i * 7), k64(i))
            expect.add(k64(i * 7))
        seen = m.keys()
        assert len(seen) == len(expect)
        assert set(seen) == expect

    def test_iteration_empty(self, make_map):
        m = make_map("hash")
        assert m.get_next_key(None) is None

    def test_iteration_from_deleted_key_restarts(self, make_map):
        m = make_map("hash", max_entries=8)
        for i in range(4):
            m.update(k64(i), k64(i))
        cursor = m.get_next_key(None)
        m.delete(cursor)
        nxt = m.get_next_key(cursor)
        assert nxt is None or nxt in m.keys()

    def test_randomized_iteration_with_mutations(self, make_map):
        # visit-count oracle: between mutations, one full sweep sees each
        # live key exactly once and always terminates
        import random
        rng = random.Random(7)
        m = make_map("hash", max_entries=64)
        model = {}
        for step in range(300):
            op = rng.random()
            key = k64(rng.randrange(100))
            if op < 0.5:
                val = k64(rng.randrange(1 << 32))
                try:
                    m.update(key, val)
                    model[key] = val
                except maps.TableFull:
                    assert len(model) == 64
            elif op < 0.8:
                if key in model:
                    m.delete(key)
                    del model[key]
            else:
                counts = {}
                cur = m.get_next_key(None)
                hops = 0
                while cur is not None:
                    counts[cur] = counts.get(cur, 0) + 1
                    cur = m.get_next_key(cur)
                    hops += 1
                    assert hops <= 200, "iteration must terminate"
                assert counts == {k: 1 for k in model}
        assert {k: m.lookup(k) for k in model} == model


class TestArrayMap:
    def test_zero_initialized_and_always_present(self, make_map):
        m = make_map("array", key_size=4, value_size=8, max_entries=4)
        assert m.lookup(k32(0)) == b"\x00" * 8
        assert m.lookup(k32(3)) == b"\x00" * 8

    def test_out_of_range_index(self, make_map):
        m = make_map("array", key_size=4, value_size=8, max_entries=4)
        with pytest.raises(maps.BadKey):
            m.lookup(k32(4))

    def test_update_and_delete_semantics(self, make_map):
        m = make_map("array", key_size=4, value_size=8, max_entries=4)
        m.update(k32(2), k64(7))
        assert m.lookup(k32(2)) == k64(7)
        with pytest.raises(maps.Unsupported):
            m.delete(k32(2))

    def test_index_iteration(self, make_map):
        m = make_map("array", key_size=4, value_size=8, max_entries=3)
        seen = []
        cur = m.get_next_key(None)
        while cur is not None:
            seen.append(struct.unpack("<I", cur)[0])
            cur = m.get_next_key(cur)
        assert seen == [0, 1, 2]


class TestPerCpuArray:
    def test_threads_see_private_slots(self, make_map):
        m = make_map("percpu_array", key_size=4, value_size=8, max_entries=1)
        results = {}

        def worker(tag):
            m.update(k32(0), k64(tag))
            results[tag] = m.lookup(k32(0))

        threads = [threading.Thread(target=worker, args=(i + 1,))
                   for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {i + 1: k64(i + 1) for i in range(4)}

    def test_sum_over_slots_equals_event_count(self, make_map):
        m = make_map("percpu_array", key_size=4, value_size=8, max_entries=1)
        per_thread = 500
        nthreads = 8

        def bump():
            for _ in range(per_thread):
                cur = struct.unpack("<Q", m.lookup(k32(0)))[0]
                m.update(k32(0), k64(cur + 1))

        threads = [threading.Thread(target=bump) for _ in range(nthreads)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        total = sum(struct.unpack("<Q", raw)[0]
                    for raw in m.lookup_all_slots(k32(0)))
        assert total == per_thread * nthreads


class TestRingBuf:
    def test_fifo_order(self, make_map):
        m = make_map("ringbuf", key_size=0, value_size=0, max_entries=4096)
        for payload in (b"A" * 10, b"B" * 3, b"C" * 25):
            m.output(payload)
        got = []
        assert m.consume(got.append) == 3
        assert got == [b"A" * 10, b"B" * 3, b"C" * 25]

    def test_consume_empty(self, make_map):
        m = make_map("ringbuf", key_size=0, value_size=0, max_entries=4096)
        assert m.consume(lambda _: None) == 0

    def test_reserve_discard_leaves_nothing(self, make_map):
        m = make_map("ringbuf", key_size=0, value_size=0, max_entries=4096)
        rec = m.reserve(16)
        m.discard(rec)
        assert m.consume(lambda _: None) == 0

    def test_ring_full_capacity_arithmetic(self, make_map):
        # capacity 4096; payload 16 -> 8-byte header + 16 = 24 per record.
        # 170 records consume 4080 bytes, leaving 16 < 24: the 171st must
        # fail.  (Computed from the record layout, not from the code path.)
        m = make_map("ringbuf", key_size=0, value_size=0, max_entries=4096)
        for _ in range(170):
            m.output(b"x" * 16)
        with pytest.raises(maps.RingFull):
            m.output(b"x" * 16)
        got = []
        assert m.consume(got.append) == 170

    def test_payload_too_large(self, make_map):
        m = make_map("ringbuf", key_size=0, value_size=0, max_entries=256)
        with pytest.raises(maps.PayloadTooLarge):
            m.reserve(249)  # 256 - 8 + 1

    def test_wraparound_preserves_records(self, make_map):
        m = make_map("ringbuf", key_size=0, value_size=0, max_entries=256)
        seq = 0
        delivered = []
        for _ in range(40):
            for _ in range(3):
                m.output(struct.pack("<Q", seq) + b"p" * 13)
                seq += 1
            m.consume(delivered.append)
        assert [struct.unpack("<Q", d[:8])[0] for d in delivered] == \
            list(range(seq))

    def test_interleaved_counts_sum(self, make_map):
        m = make_map("ringbuf", key_size=0, value_size=0, max_entries=1024)
        counts = []
        for n in (5, 9):
            for i in range(n):
                m.output(bytes([i]))
            counts.append(m.consume(lambda _: None))
        assert counts == [5, 9]

    def test_producer_consumer_threads(self, make_map):
        m = make_map("ringbuf", key_size=0, value_size=0, max_entries=8192)
        total = 3000
        got = []
        stop = threading.Event()

        def producer():
            sent = 0
            while sent < total:
                try:
                    m.output(struct.pack("<Q", sent))
                    sent += 1
                except maps.RingFull:
                    pass
            stop.set()

        t = threading.Thread(target=producer)
        t.start()
        while not (stop.is_set() and m.consume(got.append) == 0):
            m.consume(got.append)
        t.join()
        assert [struct.unpack("<Q", g)[0] for g in got] == list(range(total))


class TestCrossProcess:
    def test_fork_child_update_visible_in_parent(self, make_map):
        m = make_map("hash")
        pid = os.fork()
        if pid == 0:
            try:
                child = maps.Map.open(m.desc.segment_name)
                child.update(k64(1), k64(4242))
                child.close()
                os._exit(0)
            except BaseException:
                os._exit(1)
        _, status = os.waitpid(pid, 0)
        assert os.waitstatus_to_exitcode(status) == 0
        assert m.lookup(k64(1)) == k64(4242)

    def test_concurrent_mixed_workload(self, make_map):
        m = make_map("hash", max_entries=256)
        nthreads, per = 8, 2000
        inserts = [0] * nthreads
        deletes = [0] * nthreads

        def worker(tid):
            import random
            rng = random.Random(tid)
            for _ in range(per):
                key = k64(rng.randrange(64) * nthreads + tid)  # distinct keys
                r = rng.random()
                if r < 0.6:
                    try:
                        m.update(key, k64(tid) + k64(tid))
                    except maps.TableFull:
                        continue
                    inserts[tid] += 1
                elif r < 0.8:
                    try:
                        m.delete(key)
                        deletes[tid] += 1
                    except maps.KeyAbsent:
                        pass
                else:
                    got = m.lookup(key)
                    if got is not None:
                        # no torn values: both halves written together
                        assert got[:8] == got[8:]

        # 16-byte values so tearing is representable
        m2 = make_map("hash", key_size=8, value_size=16, max_entries=1024,
                      name="wide")
        m = m2
        threads = [threading.Thread(target=worker, args=(i,))
                   for i in range(nthreads)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        live = len(m.keys())
        net = 0
        for tid in range(nthreads):
            net += inserts[tid] - deletes[tid]
        # inserts counts updates of existing keys too, so recompute from
        # the per-key model: every key is owned by one thread, so the
        # final state per thread is deterministic given its RNG sequence.
        assert live == len({k for k in m.keys()})
        assert live <= 64 * nthreads


class TestRegistry:
    def test_handles_monotone_and_unique(self, seg_name):
        reg = maps.MapRegistry()
        h1 = reg.create(maps.MapDescriptor("hash", 8, 8, 8, "a", seg_name()))
        h2 = reg.create(maps.MapDescriptor("array", 4, 8, 8, "b", seg_name()))
        assert (h1, h2) == (3, 4)
        assert reg.get(h1).desc.name == "a"
        with pytest.raises(maps.InvalidHandle):
            reg.get(99)
        reg.close_all(destroy=True)

    def test_segment_naming_scheme(self):
        assert maps.make_segment_name("ab12", "counts") == "bpftime_ab12_counts"


@settings(max_examples=30, deadline=None)
@given(ops=st.lists(
    st.tuples(st.sampled_from(["update", "delete", "lookup"]),
              st.integers(0, 30), st.integers(0, 2 ** 32 - 1)),
    max_size=60))
def test_hash_matches_dict_model(ops):
    name = f"ubtest_hyp_{os.getpid()}"
    shm.Segment.unlink(name)
    m = maps.Map.create(maps.MapDescriptor("hash", 8, 8, 64, "h", name))
    model = {}
    try:
        for op, key, val in ops:
            kb, vb = k64(key), k64(val)
            if op == "update":
                m.update(kb, vb)
                model[kb] = vb
            elif op == "delete":
                if kb in model:
                    m.delete(kb)
                    del model[kb]
                else:
                    with pytest.raises(maps.KeyAbsent):
                        m.delete(kb)
            else:
                assert m.lookup(kb) == model.get(kb)
        assert set(m.keys()) == set(model)
    finally:
        m.destroy()
