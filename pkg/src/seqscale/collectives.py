"""Point-to-point transports and the collectives built over them.

Rank programs are generators: they ``yield Send(...)`` and ``yield Recv(...)``
and get the received payload back from the ``Recv``. The same program runs
unchanged under :class:`SimTransport` (one coordinator, logical clock) and
over :class:`TcpTransport` (one OS process per rank).
"""

from __future__ import annotations

import enum
import itertools
import socket
import struct
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Generator, Sequence

import numpy as np


class CollectiveError(RuntimeError):
    """A collective could not complete consistently on all ranks."""


class Mode(enum.Enum):
    FUSED = "fused"  # NCCL-like: no host staging, contends with compute
    SM_FREE = "sm_free"  # staged through host memory, never touches compute units


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    tag: int
    payload: bytes


@dataclass(frozen=True)
class Send:
    dst: int
    tag: int
    payload: bytes


@dataclass(frozen=True)
class Recv:
    src: int
    tag: int


RankProgram = Generator[Any, Any, Any]


@dataclass
class LinkParams:
    """Simulated link costs. Bandwidth is in GB/s (1 GB/s == 1000 bytes/us)."""

    latency_us: float = 5.0
    bandwidth_gbps: float = 25.0
    copy_cost_us_per_mb: float = 40.0  # 0.04 us/KB, per staging copy
    overlap_penalty: float = 1.10
    pairs: dict[tuple[int, int], tuple[float, float]] = field(default_factory=dict)

    def latency(self, src: int, dst: int) -> float:
        return self.pairs.get((src, dst), (self.latency_us, self.bandwidth_gbps))[0]

    def tx_us(self, nbytes: float, src: int = -1, dst: int = -1) -> float:
        bw = self.pairs.get((src, dst), (self.latency_us, self.bandwidth_gbps))[1]
        return nbytes / (bw * 1e3)

    def staging_us(self, nbytes: float) -> float:
        """D2H on the sender plus H2D on the receiver."""
        return 2.0 * self.copy_cost_us_per_mb * nbytes / 1e6


class SimTransport:
    """In-process mailboxes with a deterministic logical clock per rank.

    A message leaves when both the sender and its NIC are free, is serialized at
    link bandwidth, and lands ``latency`` later (plus host staging in
    :attr:`Mode.SM_FREE`). Receiving advances the receiver's clock to the
    delivery time.
    """

    def __init__(self, world_size: int, link: LinkParams | None = None, mode: Mode = Mode.SM_FREE,
                 start: Sequence[float] | None = None) -> None:
        self.world_size = world_size
        self.link = link or LinkParams()
        self.mode = mode
        self.clock = list(start) if start is not None else [0.0] * world_size
        self._nic_free = list(self.clock)
        self._boxes: dict[tuple[int, int, int], deque[tuple[float, bytes]]] = defaultdict(deque)
        self.messages = 0
        self.bytes_moved = 0

    def _check(self, r: int) -> None:
        if not 0 <= r < self.world_size:
            raise CollectiveError(f"rank {r} outside world of size {self.world_size}")

    def send(self, src: int, dst: int, tag: int, payload: bytes) -> None:
        self._check(src)
        self._check(dst)
        n = len(payload)
        begin = max(self.clock[src], self._nic_free[src])
        tx = self.link.tx_us(n, src, dst)
        self._nic_free[src] = begin + tx
        arrive = begin + tx + self.link.latency(src, dst)
        if self.mode is Mode.SM_FREE:
            arrive += self.link.staging_us(n)
        self._boxes[(src, dst, tag)].append((arrive, bytes(payload)))
        self.messages += 1
        self.bytes_moved += n

    def try_recv(self, dst: int, src: int, tag: int) -> bytes | None:
        box = self._boxes.get((src, dst, tag))
        if not box:
            return None
        arrive, payload = box.popleft()
        self.clock[dst] = max(self.clock[dst], arrive)
        return payload

    def pending(self) -> int:
        return sum(len(b) for b in self._boxes.values())

    def run(self, programs: Sequence[RankProgram]) -> list[Any]:
        """Drive one program per rank to completion, in rank order."""
        if len(programs) != self.world_size:
            raise CollectiveError(f"{len(programs)} programs for world of size {self.world_size}")
        results: list[Any] = [None] * self.world_size
        waiting: list[Recv | None] = [None] * self.world_size
        inbox: list[Any] = [None] * self.world_size
        live = set(range(self.world_size))
        while live:
            progressed = False
            for r in sorted(live):
                gen = programs[r]
                while True:
                    if waiting[r] is not None:
                        req = waiting[r]
                        got = self.try_recv(r, req.src, req.tag)
                        if got is None:
                            break
                        waiting[r] = None
                        inbox[r] = got
                    try:
                        op = gen.send(inbox[r])
                    except StopIteration as stop:
                        results[r] = stop.value
                        live.discard(r)
                        progressed = True
                        break
                    inbox[r] = None
                    progressed = True
                    if isinstance(op, Send):
                        self.send(r, op.dst, op.tag, op.payload)
                    elif isinstance(op, Recv):
                        self._check(op.src)
                        waiting[r] = op
                    else:
                        raise CollectiveError(f"rank {r} yielded {op!r}")
            if not progressed:
                stuck = {r: waiting[r] for r in sorted(live)}
                raise CollectiveError(f"collective deadlocked; blocked ranks: {stuck}")
        if self.pending():
            raise CollectiveError(f"{self.pending()} messages left undelivered")
        return results


# -- TCP transport --------------------------------------------------------

_FRAME = struct.Struct("<QQ")  # payload length, tag
_HELLO_TAG = 0xFFFF_FFFF_FFFF_FFFF


def encode_frame(tag: int, payload: bytes) -> bytes:
    return _FRAME.pack(len(payload), tag) + payload


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    head = _read_exact(sock, _FRAME.size)
    if head is None:
        return None
    n, tag = _FRAME.unpack(head)
    payload = _read_exact(sock, n) if n else b""
    if payload is None:
        raise CollectiveError("connection closed mid-frame")
    return tag, payload


class TcpTransport:
    """One rank's endpoint; peers are reached at ``addresses[peer]``.

    Frames are ``<u64 length><u64 tag><payload>``. The first frame on every
    connection is a hello carrying the sender's rank, so later frames need no
    source field. Inbound frames are drained by reader threads into mailboxes,
    which keeps ring stages from blocking on full socket buffers.
    """

    def __init__(self, rank: int, addresses: Sequence[tuple[str, int]], timeout: float = 30.0) -> None:
        self.rank = rank
        self.world_size = len(addresses)
        self.addresses = list(addresses)
        self.timeout = timeout
        self._out: dict[int, socket.socket] = {}
        self._boxes: dict[tuple[int, int], deque[bytes]] = defaultdict(deque)
        self._cv = threading.Condition()
        self._threads: list[threading.Thread] = []
        self._listener = socket.create_server(self.addresses[rank], reuse_port=False)
        self._listener.settimeout(timeout)
        self._accepting = threading.Thread(target=self._accept_loop, daemon=True)
        self._accepting.start()

    def _accept_loop(self) -> None:
        for _ in range(self.world_size - 1):
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._reader, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, conn: socket.socket) -> None:
        with conn:
            hello = read_frame(conn)
            if hello is None or hello[0] != _HELLO_TAG:
                return
            src = struct.unpack("<Q", hello[1])[0]
            while True:
                frame = read_frame(conn)
                if frame is None:
                    return
                with self._cv:
                    self._boxes[(src, frame[0])].append(frame[1])
                    self._cv.notify_all()

    def _conn(self, dst: int) -> socket.socket:
        if dst not in self._out:
            sock = socket.create_connection(self.addresses[dst], timeout=self.timeout)
            sock.sendall(encode_frame(_HELLO_TAG, struct.pack("<Q", self.rank)))
            self._out[dst] = sock
        return self._out[dst]

    def send(self, dst: int, tag: int, payload: bytes) -> None:
        if dst == self.rank:
            with self._cv:
                self._boxes[(dst, tag)].append(bytes(payload))
                self._cv.notify_all()
            return
        self._conn(dst).sendall(encode_frame(tag, payload))

    def recv(self, src: int, tag: int) -> bytes:
        with self._cv:
            ok = self._cv.wait_for(lambda: self._boxes[(src, tag)], timeout=self.timeout)
            if not ok:
                raise CollectiveError(f"rank {self.rank}: timed out waiting for rank {src} tag {tag}")
            return self._boxes[(src, tag)].popleft()

    def run(self, program: RankProgram) -> Any:
        inbox = None
        while True:
            try:
                op = program.send(inbox)
            except StopIteration as stop:
                return stop.value
            inbox = None
            if isinstance(op, Send):
                self.send(op.dst, op.tag, op.payload)
            elif isinstance(op, Recv):
                inbox = self.recv(op.src, op.tag)
            else:
                raise CollectiveError(f"rank {self.rank} yielded {op!r}")

    def close(self) -> None:
        for s in self._out.values():
            try:
                s.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            s.close()
        self._listener.close()


# -- rank programs ------------------------------------------------------------


def ring_all_gather_program(rank: int, world_size: int, chunk: bytes, tag: int = 1,
                            sizes: Sequence[int] | None = None) -> RankProgram:
    """At stage ``s`` rank ``r`` forwards chunk ``(r - s) mod p`` to ``r + 1``."""
    p = world_size
    held: list[bytes | None] = [None] * p
    held[rank] = chunk
    right, left = (rank + 1) % p, (rank - 1) % p
    for s in range(p - 1):
        yield Send(right, tag, held[(rank - s) % p])
        idx = (rank - s - 1) % p
        got = yield Recv(left, tag)
        if sizes is not None and len(got) != sizes[idx]:
            raise CollectiveError(f"rank {rank}: chunk {idx} has {len(got)} bytes, metadata says {sizes[idx]}")
        held[idx] = got
    return held


def pairwise_all_to_all_program(rank: int, world_size: int, send: Sequence[bytes], tag: int = 2) -> RankProgram:
    p = world_size
    out: list[bytes | None] = [None] * p
    out[rank] = bytes(send[rank])
    for k in range(1, p):
        dst = (rank + k) % p
        yield Send(dst, tag, send[dst])
    for k in range(1, p):
        src = (rank - k) % p
        out[src] = yield Recv(src, tag)
    return out


# -- handles --------------------------------------------------------------

_handle_ids = itertools.count()


class CollectiveHandle:
    """Result of an asynchronously issued collective."""

    PENDING = "pending"
    COMPLETE = "complete"

    def __init__(self, name: str = "") -> None:
        self.id = next(_handle_ids)
        self.name = name
        self.state = self.PENDING
        self._result: Any = None
        self.end_time: float | None = None

    def complete(self, result: Any, end_time: float | None = None) -> CollectiveHandle:
        self._result = result
        self.end_time = end_time
        self.state = self.COMPLETE
        return self

    def wait(self) -> Any:
        if self.state != self.COMPLETE:
            raise CollectiveError(f"handle {self.id} ({self.name}) awaited before completion")
        return self._result


# -- coordinator-level collectives -----------------------------------------


def _nbytes(x: Any) -> int:
    if isinstance(x, np.ndarray):
        return int(x.nbytes)
    if isinstance(x, (bytes, bytearray, memoryview)):
        return len(x)
    if isinstance(x, (tuple, list)):
        return sum(_nbytes(y) for y in x)
    if x is None:
        return 0
    raise TypeError(f"cannot size payload of type {type(x).__name__}")


class World:
    """All ranks' view of a process group, driven by one coordinator.

    Collective calls take every rank's input at once and return every rank's
    output. ``last_us`` holds the logical duration of the most recent call. Byte
    payloads for the ring and pairwise schedules go through a fresh
    :class:`SimTransport`; array payloads are moved directly and timed with
    the same cost model.
    """

    def __init__(self, world_size: int, link: LinkParams | None = None, mode: Mode = Mode.SM_FREE) -> None:
        if world_size < 1:
            raise CollectiveError("world_size must be >= 1")
        self.world_size = world_size
        self.link = link or LinkParams()
        self.mode = mode
        self.last_us = 0.0
        self.last_messages = 0

    def _staging(self, nbytes: float) -> float:
        return self.link.staging_us(nbytes) if self.mode is Mode.SM_FREE else 0.0

    def _check_ranks(self, items: Sequence, what: str) -> None:
        if len(items) != self.world_size:
            raise CollectiveError(f"{what}: got {len(items)} rank inputs for world of size {self.world_size}")
        absent = [r for r, x in enumerate(items) if x is None]
        if absent:
            raise CollectiveError(f"{what}: ranks {absent} did not join")

    # reference gather: every rank ends with the rank-ordered list of chunks
    def all_gather(self, chunks: Sequence[Any], sizes: Sequence[int] | None = None) -> list[list[Any]]:
        self._check_ranks(chunks, "all_gather")
        if sizes is not None:
            bad = [r for r, c in enumerate(chunks) if _nbytes(c) != sizes[r]]
            if bad:
                raise CollectiveError(f"all_gather: size metadata mismatch on ranks {bad}")
        self.last_us = self.all_gather_time([_nbytes(c) for c in chunks])
        self.last_messages = self.world_size * (self.world_size - 1)
        return [list(chunks) for _ in range(self.world_size)]

    def ring_all_gather(self, chunks: Sequence[bytes], sizes: Sequence[int] | None = None,
                        start: Sequence[float] | None = None) -> list[list[bytes]]:
        self._check_ranks(chunks, "ring_all_gather")
        p = self.world_size
        if p == 1:
            self.last_us, self.last_messages = 0.0, 0
            return [[bytes(chunks[0])]]
        t = SimTransport(p, self.link, self.mode, start)
        t0 = max(t.clock)
        out = t.run([ring_all_gather_program(r, p, bytes(chunks[r]), sizes=sizes) for r in range(p)])
        self.last_us = max(t.clock) - t0
        self.last_messages = t.messages
        return out

    def all_to_all(self, send: Sequence[Sequence[Any]]) -> list[list[Any]]:
        """``out[r][s] == send[s][r]``."""
        self._check_ranks(send, "all_to_all")
        p = self.world_size
        bad = [r for r, row in enumerate(send) if len(row) != p]
        if bad:
            raise CollectiveError(f"all_to_all: ranks {bad} do not provide {p} destination slots")
        self.last_us = self.all_to_all_time([[_nbytes(x) for x in row] for row in send])
        self.last_messages = p * (p - 1)
        return [[send[s][r] for s in range(p)] for r in range(p)]

    def all_to_all_bytes(self, send: Sequence[Sequence[bytes]]) -> list[list[bytes]]:
        """Pairwise exchange through the transport (one message per ordered pair)."""
        self._check_ranks(send, "all_to_all")
        p = self.world_size
        t = SimTransport(p, self.link, self.mode)
        out = t.run([pairwise_all_to_all_program(r, p, send[r]) for r in range(p)])
        self.last_us = max(t.clock)
        self.last_messages = t.messages
        return out

    def all_reduce_sum(self, vecs: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Elementwise sum accumulated in rank order 0..p-1 on every rank."""
        self._check_ranks(vecs, "all_reduce_sum")
        shapes = {np.shape(v) for v in vecs}
        if len(shapes) != 1:
            raise CollectiveError(f"all_reduce_sum: shape mismatch {sorted(shapes)}")
        acc = np.array(vecs[0], dtype=np.float64, copy=True)
        for v in vecs[1:]:
            acc = acc + v
        self.last_us = self.all_reduce_time(int(acc.nbytes))
        self.last_messages = 2 * self.world_size * (self.world_size - 1)
        return [acc.copy() for _ in range(self.world_size)]

    # -- cost model (all ranks start together) --

    def all_gather_time(self, sizes: Sequence[int]) -> float:
        """Ring schedule timing; mirrors :class:`SimTransport` exactly."""
        p = self.world_size
        if p == 1:
            return 0.0
        clock = [0.0] * p
        nic = [0.0] * p
        for s in range(p - 1):
            arrive = [0.0] * p
            for r in range(p):
                n = sizes[(r - s) % p]
                dst = (r + 1) % p
                begin = max(clock[r], nic[r])
                tx = self.link.tx_us(n, r, dst)
                nic[r] = begin + tx
                arrive[dst] = begin + tx + self.link.latency(r, dst) + self._staging(n)
            clock = [max(c, a) for c, a in zip(clock, arrive)]
        return max(clock)

    def all_to_all_time(self, nbytes: Sequence[Sequence[int]]) -> float:
        """Pairwise schedule: rank ``r`` sends to ``r+1, r+2, ...`` back to back."""
        p = self.world_size
        done = 0.0
        for r in range(p):
            nic = 0.0
            for k in range(1, p):
                dst = (r + k) % p
                n = nbytes[r][dst]
                nic += self.link.tx_us(n, r, dst)
                done = max(done, nic + self.link.latency(r, dst) + self._staging(n))
        return done

    def jagged_all_to_all_time(self, nbytes: Sequence[Sequence[int]]) -> float:
        """Size exchange (one u64 per pair) followed by the payload exchange."""
        p = self.world_size
        if p == 1:
            return 0.0
        return self.all_to_all_time([[8] * p for _ in range(p)]) + self.all_to_all_time(nbytes)

    def all_reduce_time(self, nbytes: int) -> float:
        """Ring reduce-scatter + all-gather; reductions always run fused."""
        p = self.world_size
        if p == 1:
            return 0.0
        step = self.link.latency_us + self.link.tx_us(nbytes / p)
        return 2 * (p - 1) * step
