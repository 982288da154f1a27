import multiprocessing as mp
import socket

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqscale.collectives import (CollectiveError, CollectiveHandle, LinkParams, Mode, Recv, Send, SimTransport,
                                  TcpTransport, World, encode_frame, pairwise_all_to_all_program,
                                  ring_all_gather_program)

payloads = st.binary(max_size=64)


def ring_trace(p):
    """Hand-written schedule: which chunk index each rank sends at each stage."""
    return [[(r - s) % p for r in range(p)] for s in range(p - 1)]


class TestAllGather:
    def test_two_ranks(self):
        assert World(2).all_gather([b"A", b"B"]) == [[b"A", b"B"]] * 2

    def test_single_rank(self):
        assert World(1).all_gather([b"A"]) == [[b"A"]]
        assert World(1).ring_all_gather([b"A"]) == [[b"A"]]

    def test_size_mismatch(self):
        with pytest.raises(CollectiveError, match="mismatch"):
            World(2).all_gather([b"A", b"BB"], sizes=[1, 1])

    def test_absent_rank(self):
        with pytest.raises(CollectiveError, match="did not join"):
            World(3).ring_all_gather([b"A", None, b"C"])

    def test_wrong_world(self):
        with pytest.raises(CollectiveError):
            World(3).all_gather([b"A"])


class TestRing:
    def test_three_rank_schedule(self):
        # record what each rank sends per stage and compare with the hand trace
        p, chunks = 3, [b"A", b"B", b"C"]
        sent = [[] for _ in range(p)]

        def spy(r):
            gen = ring_all_gather_program(r, p, chunks[r])
            res = None
            try:
                op = next(gen)
                while True:
                    if isinstance(op, Send):
                        sent[r].append(chunks.index(op.payload))
                    res = yield op
                    op = gen.send(res)
            except StopIteration as stop:
                return stop.value

        out = SimTransport(p).run([spy(r) for r in range(p)])
        assert out == [chunks] * p
        assert [[sent[r][s] for r in range(p)] for s in range(p - 1)] == ring_trace(p)

    def test_two_rank_swap(self):
        w = World(2)
        assert w.ring_all_gather([b"x", b"y"]) == [[b"x", b"y"]] * 2
        assert w.last_messages == 2

    @pytest.mark.parametrize("p", range(2, 9))
    def test_message_count(self, p):
        w = World(p)
        w.ring_all_gather([bytes([r]) for r in range(p)])
        assert w.last_messages == p * (p - 1)

    @given(st.integers(2, 8).flatmap(lambda p: st.lists(payloads, min_size=p, max_size=p)))
    def test_equals_reference(self, chunks):
        w = World(len(chunks))
        assert w.ring_all_gather(chunks) == w.all_gather(chunks)

    @pytest.mark.parametrize("mode", list(Mode))
    @pytest.mark.parametrize("p", [2, 4, 7])
    def test_timing_matches_transport(self, p, mode):
        rng = np.random.default_rng(p)
        chunks = [bytes(rng.integers(0, 256, size=int(n), dtype=np.uint8)) for n in rng.integers(0, 5000, p)]
        w = World(p, mode=mode)
        w.ring_all_gather(chunks)
        assert w.last_us == pytest.approx(w.all_gather_time([len(c) for c in chunks]))

    def test_zero_payload_latency_only(self):
        w = World(4)
        w.ring_all_gather([b""] * 4)
        assert w.last_us == pytest.approx(3 * 5.0)

    def test_bandwidth_term_doubles(self):
        link = LinkParams(latency_us=0.0, copy_cost_us_per_mb=0.0)
        w = World(4, link)
        w.ring_all_gather([b"\0" * 1000] * 4)
        t1 = w.last_us
        w.ring_all_gather([b"\0" * 2000] * 4)
        assert w.last_us == pytest.approx(2 * t1)

    def test_staging_cost(self):
        # each message pays 2 copies at 40 us/MB in sm_free mode
        n = 1_000_000
        fused = World(2, mode=Mode.FUSED)
        free = World(2, mode=Mode.SM_FREE)
        fused.ring_all_gather([b"\0" * n] * 2)
        free.ring_all_gather([b"\0" * n] * 2)
        assert free.last_us - fused.last_us == pytest.approx(80.0)

    def test_metadata_checked(self):
        with pytest.raises(CollectiveError, match="metadata"):
            World(3).ring_all_gather([b"a", b"bb", b"c"], sizes=[1, 1, 1])

    def test_deterministic_clock(self):
        chunks = [b"x" * 100, b"y" * 7, b"z" * 3000]
        a, b = World(3), World(3)
        a.ring_all_gather(chunks)
        b.ring_all_gather(chunks)
        assert a.last_us == b.last_us


class TestAllToAll:
    def test_transpose_example(self):
        out = World(2).all_to_all([[b"x", b"y"], [b"u", b"v"]])
        assert out == [[b"x", b"u"], [b"y", b"v"]]

    def test_empty(self):
        out = World(3).all_to_all_bytes([[b""] * 3] * 3)
        assert out == [[b""] * 3] * 3

    def test_identity(self):
        assert World(1).all_to_all([[b"q"]]) == [[b"q"]]

    def test_bad_slot_count(self):
        with pytest.raises(CollectiveError, match="destination slots"):
            World(2).all_to_all([[1, 2], [3]])

    @given(st.integers(1, 6).flatmap(lambda p: st.lists(st.lists(payloads, min_size=p, max_size=p),
                                                        min_size=p, max_size=p)))
    def test_pairwise_matches_transpose(self, send):
        w = World(len(send))
        out = w.all_to_all_bytes(send)
        assert out == w.all_to_all(send)
        assert w.all_to_all(w.all_to_all(send)) == send

    def test_jagged_adds_size_exchange(self):
        w = World(3)
        m = [[0, 800, 800], [800, 0, 800], [800, 800, 0]]
        assert w.jagged_all_to_all_time(m) == pytest.approx(w.all_to_all_time([[8] * 3] * 3) + w.all_to_all_time(m))


class TestAllReduce:
    def test_hand_sum(self):
        out = World(2).all_reduce_sum([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        assert [o.tolist() for o in out] == [[4.0, 6.0]] * 2

    def test_zero_identity(self):
        v = np.array([0.3, -1.7])
        assert np.array_equal(World(2).all_reduce_sum([np.zeros(2), v])[0], v)

    def test_ones(self):
        p = 5
        out = World(p).all_reduce_sum([np.ones(4)] * p)
        assert all(np.array_equal(o, np.full(4, p)) for o in out)

    def test_rank_order(self):
        rng = np.random.default_rng(3)
        vecs = [rng.normal(size=16) * 10.0 ** rng.integers(-8, 8) for _ in range(6)]
        ref = vecs[0].copy()
        for v in vecs[1:]:
            ref = ref + v
        runs = [World(6).all_reduce_sum(vecs)[0] for _ in range(10)]
        assert all(np.array_equal(r, ref) for r in runs)

    def test_shape_mismatch(self):
        with pytest.raises(CollectiveError, match="shape"):
            World(2).all_reduce_sum([np.zeros(2), np.zeros(3)])

    def test_ring_time(self):
        w = World(4)
        assert w.all_reduce_time(4000) == pytest.approx(2 * 3 * (5.0 + 1000 / 25000))


class TestSimTransport:
    def test_fifo_per_tag(self):
        t = SimTransport(2)

        def sender():
            yield Send(1, 7, b"a")
            yield Send(1, 7, b"b")

        def receiver():
            x = yield Recv(0, 7)
            y = yield Recv(0, 7)
            return x + y

        assert t.run([sender(), receiver()])[1] == b"ab"

    def test_deadlock_detected(self):
        def wait_forever(src):
            yield Recv(src, 1)

        with pytest.raises(CollectiveError, match="deadlock"):
            SimTransport(2).run([wait_forever(1), wait_forever(0)])

    def test_undelivered(self):
        def fire():
            yield Send(1, 1, b"x")

        def idle():
            return None
            yield

        with pytest.raises(CollectiveError, match="undelivered"):
            SimTransport(2).run([fire(), idle()])

    def test_delivery_time(self):
        link = LinkParams(latency_us=3.0, bandwidth_gbps=1.0, copy_cost_us_per_mb=0.0)
        t = SimTransport(2, link, Mode.FUSED)
        t.send(0, 1, 0, b"\0" * 500)
        t.try_recv(1, 0, 0)
        assert t.clock[1] == pytest.approx(3.0 + 0.5)

    def test_per_pair_override(self):
        link = LinkParams(pairs={(0, 1): (100.0, 25.0)})
        assert link.latency(0, 1) == 100.0 and link.latency(1, 0) == 5.0


class TestHandle:
    def test_wait_before_complete(self):
        with pytest.raises(CollectiveError):
            CollectiveHandle("x").wait()

    def test_idempotent(self):
        h = CollectiveHandle("x").complete(42)
        assert h.wait() == h.wait() == 42


def _free_ports(n):
    socks = [socket.socket() for _ in range(n)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def _tcp_worker(rank, addrs, chunk, queue):
    t = TcpTransport(rank, addrs, timeout=20.0)
    try:
        gathered = t.run(ring_all_gather_program(rank, len(addrs), chunk))
        a2a = t.run(pairwise_all_to_all_program(rank, len(addrs), [bytes([rank, d]) for d in range(len(addrs))]))
        queue.put((rank, gathered, a2a))
    finally:
        t.close()


def test_tcp_processes():
    p = 3
    addrs = [("127.0.0.1", port) for port in _free_ports(p)]
    chunks = [b"alpha", b"", b"gamma" * 1000]
    ctx = mp.get_context("fork")
    q = ctx.Queue()
    procs = [ctx.Process(target=_tcp_worker, args=(r, addrs, chunks[r], q)) for r in range(p)]
    for pr in procs:
        pr.start()
    results = dict((r, (g, a)) for r, g, a in (q.get(timeout=30) for _ in range(p)))
    for pr in procs:
        pr.join(timeout=10)
        assert pr.exitcode == 0
    for r in range(p):
        assert results[r][0] == chunks
        assert results[r][1] == [bytes([s, r]) for s in range(p)]


def test_frame_format():
    f = encode_frame(5, b"abc")
    assert f[:8] == (3).to_bytes(8, "little") and f[8:16] == (5).to_bytes(8, "little") and f[16:] == b"abc"
