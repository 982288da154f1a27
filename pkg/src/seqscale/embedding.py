"""Row-wise sharded embedding table and the two update protocols.

Global row ``g`` lives on shard ``g mod n`` at local row ``g div n``. IDs move
between two layouts: batch-major (grouped by the sample that referenced them)
and shard-major (grouped by owning shard, segments = source ranks). Both
protocols here operate on all ranks at once through a coordinator-level
:class:`~seqscale.collectives.World` and report every collective they issue as
a :class:`CommOp`, which the pipeline places on a timeline.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .collectives import World
from .jagged import ID_DTYPE, JaggedTensor

ID_BYTES = 8
MASK_BYTES = 1


class EmbeddingError(ValueError):
    """Out-of-range row, misaligned gradients, or a layout mix-up."""


class ProtocolError(RuntimeError):
    """Protocol steps called out of order."""


class IdLayout(enum.Enum):
    BATCH_MAJOR = "batch_major"
    SHARD_MAJOR = "shard_major"


@dataclass(frozen=True)
class IndexSet:
    layout: IdLayout
    ids: JaggedTensor
    rank: int = 0

    @property
    def flat(self) -> np.ndarray:
        return self.ids.values

    @property
    def unique_ids(self) -> np.ndarray:
        return np.unique(self.ids.values)

    @classmethod
    def batch_major(cls, segments: Sequence[Sequence[int]], rank: int = 0) -> IndexSet:
        return cls(IdLayout.BATCH_MAJOR, JaggedTensor.from_segments(segments, ID_DTYPE), rank)

    @classmethod
    def shard_major(cls, ids: Sequence[int] | np.ndarray, rank: int = 0) -> IndexSet:
        """A single-segment shard-major set; handy for local collision checks."""
        v = np.asarray(ids, dtype=ID_DTYPE)
        return cls(IdLayout.SHARD_MAJOR, JaggedTensor(v, [v.size]), rank)


@dataclass(frozen=True)
class CommOp:
    """One collective issued by a protocol step."""

    name: str
    category: str  # ids | emb | grad
    us: float
    nbytes: int  # off-diagonal payload bytes
    matrix: tuple[tuple[int, ...], ...] = ()  # per (src, dst) payload bytes


# -- table ------------------------------------------------------------------

_CKPT_HEAD = struct.Struct("<QQQ")


class ShardedEmbedding:
    def __init__(self, shards: list[np.ndarray], total_rows: int, learning_rate: float = 0.05) -> None:
        n = len(shards)
        if n < 1:
            raise EmbeddingError("need at least one shard")
        for r, s in enumerate(shards):
            if s.shape[0] != len(range(r, total_rows, n)):
                raise EmbeddingError(f"shard {r} has {s.shape[0]} rows, expected {len(range(r, total_rows, n))}")
        self.shards = shards
        self.total_rows = int(total_rows)
        self.num_shards = n
        self.dim = int(shards[0].shape[1])
        self.learning_rate = float(learning_rate)

    @classmethod
    def from_dense(cls, dense: np.ndarray, num_shards: int, learning_rate: float = 0.05) -> ShardedEmbedding:
        dense = np.asarray(dense, dtype=np.float64)
        return cls([dense[r::num_shards].copy() for r in range(num_shards)], dense.shape[0], learning_rate)

    @classmethod
    def init(cls, total_rows: int, dim: int, num_shards: int, learning_rate: float = 0.05,
             seed: int = 0, scale: float = 0.1) -> ShardedEmbedding:
        rng = np.random.default_rng(seed)
        return cls.from_dense(rng.normal(0.0, scale, size=(total_rows, dim)), num_shards, learning_rate)

    def copy(self) -> ShardedEmbedding:
        return ShardedEmbedding([s.copy() for s in self.shards], self.total_rows, self.learning_rate)

    def owner(self, ids: np.ndarray) -> np.ndarray:
        return (np.asarray(ids, dtype=ID_DTYPE) % np.uint64(self.num_shards)).astype(np.int64)

    def local(self, ids: np.ndarray) -> np.ndarray:
        return (np.asarray(ids, dtype=ID_DTYPE) // np.uint64(self.num_shards)).astype(np.int64)

    def check_ids(self, ids: np.ndarray) -> None:
        ids = np.asarray(ids, dtype=ID_DTYPE)
        if ids.size and int(ids.max()) >= self.total_rows:
            raise EmbeddingError(f"row ID {int(ids.max())} out of range for table with {self.total_rows} rows")

    def _locals_on(self, rank: int, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=ID_DTYPE)
        self.check_ids(ids)
        if ids.size:
            stray = np.flatnonzero(self.owner(ids) != rank)
            if stray.size:
                raise EmbeddingError(f"row ID {int(ids[stray[0]])} is not owned by shard {rank}")
        return self.local(ids)

    def lookup(self, rank: int, ids: np.ndarray) -> np.ndarray:
        """Rows for ``ids`` (all owned by ``rank``) in the given order."""
        return self.shards[rank][self._locals_on(rank, ids)]

    def update(self, rank: int, ids: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """SGD step on shard ``rank``. Returns ``(unique_ids, updated_rows)``.

        ``ids`` arrive in shard-major order (source rank, then position), so a
        stable sort by ID yields the (ID, source, position) accumulation order.
        Each row's contributions are summed sequentially in that order, which
        makes the result independent of which other rows share the call.
        """
        ids = np.asarray(ids, dtype=ID_DTYPE)
        grads = np.asarray(grads, dtype=np.float64)
        if grads.shape != (ids.size, self.dim):
            raise EmbeddingError(f"gradients of shape {grads.shape} do not align with {ids.size} IDs x dim {self.dim}")
        self._locals_on(rank, ids)
        if ids.size == 0:
            return ids.copy(), np.empty((0, self.dim))
        order = np.argsort(ids, kind="stable")
        uniq, inv = np.unique(ids[order], return_inverse=True)
        acc = np.zeros((uniq.size, self.dim))
        np.add.at(acc, inv, grads[order])
        rows = self.local(uniq)
        table = self.shards[rank]
        new = table[rows] - self.learning_rate * acc
        if not np.all(np.isfinite(new)):
            raise EmbeddingError(f"non-finite values after update on shard {rank}")
        table[rows] = new
        return uniq, new

    def dense(self) -> np.ndarray:
        out = np.empty((self.total_rows, self.dim))
        for r, s in enumerate(self.shards):
            out[r::self.num_shards] = s
        return out

    # checkpoint: u64 total_rows, u64 dim, u64 num_shards, then float64 rows in global order
    def to_bytes(self) -> bytes:
        return _CKPT_HEAD.pack(self.total_rows, self.dim, self.num_shards) + self.dense().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, learning_rate: float = 0.05) -> ShardedEmbedding:
        if len(buf) < _CKPT_HEAD.size:
            raise EmbeddingError("checkpoint shorter than its header")
        rows, dim, n = _CKPT_HEAD.unpack_from(buf)
        body = np.frombuffer(buf, dtype="<f8", count=rows * dim, offset=_CKPT_HEAD.size)
        return cls.from_dense(body.reshape(rows, dim), n, learning_rate)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())


# -- routing ------------------------------------------------------------------


@dataclass
class Route:
    """Where each batch-major occurrence went; kept for the return trip.

    ``positions[s][d]`` are indices into rank ``s``'s flat ID array, in the
    order they appear in shard ``d``'s segment for source ``s``.
    """

    positions: list[list[np.ndarray]]
    src_sizes: list[int]

    @property
    def num_ranks(self) -> int:
        return len(self.src_sizes)

    def recv_counts(self, d: int) -> list[int]:
        return [int(self.positions[s][d].size) for s in range(self.num_ranks)]


def make_route(flat_ids: Sequence[np.ndarray], num_shards: int) -> Route:
    positions = []
    for ids in flat_ids:
        owner = (np.asarray(ids, dtype=ID_DTYPE) % np.uint64(num_shards)).astype(np.int64)
        order = np.argsort(owner, kind="stable")
        counts = np.bincount(owner, minlength=num_shards)
        positions.append(np.split(order, np.cumsum(counts)[:-1]))
    return Route(positions, [int(np.size(i)) for i in flat_ids])


def _timed_all_to_all(world: World, send: list[list[np.ndarray]], item_bytes: int,
                      name: str, category: str, jagged: bool = True) -> tuple[list[list[np.ndarray]], CommOp]:
    nbytes = [[int(len(x)) * item_bytes for x in row] for row in send]
    recv = world.all_to_all(send)
    return recv, _op(world, name, category, nbytes, jagged)


def _op(world: World, name: str, category: str, nbytes: list[list[int]], jagged: bool = True) -> CommOp:
    us = world.jagged_all_to_all_time(nbytes) if jagged else world.all_to_all_time(nbytes)
    p = len(nbytes)
    total = sum(nbytes[s][d] for s in range(p) for d in range(p) if s != d)
    return CommOp(name, category, us, total, tuple(tuple(r) for r in nbytes))


def _fused_op(world: World, name: str, category: str, a: CommOp, b: CommOp) -> CommOp:
    """One exchange carrying both payloads."""
    m = [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a.matrix, b.matrix)]
    return _op(world, name, category, m)


def to_shard_major_values(world: World, route: Route, values: Sequence[np.ndarray],
                          item_bytes: int, name: str, category: str,
                          masks: Sequence[np.ndarray] | None = None) -> tuple[list[np.ndarray], CommOp]:
    """Send each rank's batch-major values to the owning shards.

    With ``masks``, only occurrences whose mask is True travel; shard-side
    order still follows (source rank, position).
    """
    p = route.num_ranks
    send = []
    for s in range(p):
        row = []
        for d in range(p):
            pos = route.positions[s][d]
            if masks is not None:
                pos = pos[masks[s][pos]]
            row.append(np.asarray(values[s])[pos])
        send.append(row)
    recv, op = _timed_all_to_all(world, send, item_bytes, name, category)
    return [np.concatenate(recv[d]) if recv[d] else np.empty(0) for d in range(p)], op


def to_batch_major_values(world: World, route: Route, values: Sequence[np.ndarray],
                          item_bytes: int, name: str, category: str,
                          shard_masks: Sequence[np.ndarray] | None = None,
                          fill: float = 0.0) -> tuple[list[np.ndarray], CommOp]:
    """Inverse of :func:`to_shard_major_values`.

    ``values[d]`` is aligned with shard ``d``'s occurrences (restricted to
    ``shard_masks[d]`` when given). Untouched batch-major slots get ``fill``.
    """
    p = route.num_ranks
    send = []
    for d in range(p):
        counts = route.recv_counts(d)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        if shard_masks is not None:
            # per-source counts after masking
            sel = [int(shard_masks[d][bounds[s]: bounds[s + 1]].sum()) for s in range(p)]
            bounds = np.concatenate([[0], np.cumsum(sel)])
        send.append([values[d][bounds[s]: bounds[s + 1]] for s in range(p)])
    recv, op = _timed_all_to_all(world, send, item_bytes, name, category)
    out = []
    for s in range(p):
        row_shape = values[0].shape[1:] if len(values) else ()
        dtype = values[0].dtype if len(values) else np.float64
        buf = np.full((route.src_sizes[s],) + row_shape, fill, dtype=dtype)
        for d in range(p):
            pos = route.positions[s][d]
            if shard_masks is not None:
                bounds = np.concatenate([[0], np.cumsum(route.recv_counts(d))])
                pos = pos[shard_masks[d][bounds[s]: bounds[s + 1]]]
            buf[pos] = recv[s][d]
        out.append(buf)
    return out, op


def to_shard_major(world: World, batch_sets: Sequence[IndexSet], total_rows: int) -> tuple[list[IndexSet], Route, CommOp]:
    """Route every rank's batch-major IDs to their owners."""
    p = world.world_size
    if len(batch_sets) != p:
        raise EmbeddingError(f"{len(batch_sets)} index sets for {p} ranks")
    flat = []
    for bs in batch_sets:
        if bs.layout is not IdLayout.BATCH_MAJOR:
            raise EmbeddingError("to_shard_major expects batch-major input")
        v = bs.flat
        if v.size and int(v.max()) >= total_rows:
            raise EmbeddingError(f"row ID {int(v.max())} out of range for table with {total_rows} rows")
        flat.append(v)
    route = make_route(flat, p)
    send = [[flat[s][route.positions[s][d]] for d in range(p)] for s in range(p)]
    recv, op = _timed_all_to_all(world, send, ID_BYTES, "ids_a2a", "ids")
    out = [IndexSet(IdLayout.SHARD_MAJOR, JaggedTensor(np.concatenate(recv[d]).astype(ID_DTYPE),
                                                        [x.size for x in recv[d]]), d) for d in range(p)]
    return out, route, op


def compute_collision(cur: IndexSet, nxt: IndexSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(co, ex_cur, ex_next)`` on unique IDs, each sorted ascending."""
    if cur.layout is not IdLayout.SHARD_MAJOR or nxt.layout is not IdLayout.SHARD_MAJOR:
        raise EmbeddingError("collisions are only defined between shard-major index sets")
    a, b = np.unique(cur.flat), np.unique(nxt.flat)
    co = np.intersect1d(a, b, assume_unique=True)
    return co, np.setdiff1d(a, co, assume_unique=True), np.setdiff1d(b, co, assume_unique=True)


def collision_pct(cur: IndexSet, nxt: IndexSet) -> float:
    """Fraction of the next iteration's unique rows that also appear now."""
    co, _, ex_next = compute_collision(cur, nxt)
    denom = co.size + ex_next.size
    if denom == 0:
        raise EmbeddingError("collision percentage undefined: next iteration references no rows")
    return co.size / denom


def lookup(table: ShardedEmbedding, ids: IndexSet) -> np.ndarray:
    if ids.layout is not IdLayout.SHARD_MAJOR:
        raise EmbeddingError("lookup expects shard-major IDs")
    return table.lookup(ids.rank, ids.flat)


def update_embedding(table: ShardedEmbedding, ids: IndexSet, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if ids.layout is not IdLayout.SHARD_MAJOR:
        raise EmbeddingError("update_embedding expects shard-major IDs")
    return table.update(ids.rank, ids.flat, grads)


# -- protocols ------------------------------------------------------------------


def _row_bytes(table: ShardedEmbedding) -> int:
    return table.dim * 8


class SynchronizedEmbedding:
    """Blocking reference: route IDs, look up, return rows; later route grads and update."""

    def __init__(self, table: ShardedEmbedding, world: World) -> None:
        if table.num_shards != world.world_size:
            raise EmbeddingError("one shard per rank required")
        self.table = table
        self.world = world
        self._state: tuple[list[IndexSet], Route] | None = None

    def forward(self, batch_ids: Sequence[np.ndarray]) -> tuple[list[np.ndarray], list[CommOp]]:
        if self._state is not None:
            raise ProtocolError("forward called twice without backward")
        sets = [IndexSet(IdLayout.BATCH_MAJOR, JaggedTensor(np.asarray(v, dtype=ID_DTYPE), [len(v)]), r)
                for r, v in enumerate(batch_ids)]
        shard_sets, route, ids_op = to_shard_major(self.world, sets, self.table.total_rows)
        rows = [lookup(self.table, s) for s in shard_sets]
        out, emb_op = to_batch_major_values(self.world, route, rows, _row_bytes(self.table), "emb_a2a", "emb")
        self._state = (shard_sets, route)
        return out, [ids_op, emb_op]

    def backward(self, grads: Sequence[np.ndarray]) -> list[CommOp]:
        if self._state is None:
            raise ProtocolError("backward called before forward")
        shard_sets, route = self._state
        self._state = None
        g, op = to_shard_major_values(self.world, route, grads, _row_bytes(self.table), "grad_a2a", "grad")
        for d, s in enumerate(shard_sets):
            update_embedding(self.table, s, g[d].reshape(-1, self.table.dim))
        return [op]

    def flush(self) -> list[CommOp]:
        if self._state is not None:
            raise ProtocolError("flush with a forward still awaiting its backward")
        return []


@dataclass
class IterationContext:
    """Carry-over state between consecutive iterations of the prioritized protocol."""

    iteration: int = -1
    awaiting_backward: bool = False
    # iteration i, shard-major view + how to get back
    route: Route | None = None
    shard_sets: list[IndexSet] | None = None
    co_shard_mask: list[np.ndarray] | None = None  # per shard occurrence: row also used at i+1
    co_batch_mask: list[np.ndarray] | None = None  # same, batch-major
    # inputs for forward(i): exclusive rows prefetched earlier, collision rows from backward(i-1)
    ex_rows: list[np.ndarray] | None = None
    ex_mask: list[np.ndarray] | None = None
    co_rows: list[np.ndarray] | None = None
    # iteration i+1 as routed during forward(i)
    next_route: Route | None = None
    next_shard_sets: list[IndexSet] | None = None
    next_ex_shard_mask: list[np.ndarray] | None = None
    next_ex_rows: list[np.ndarray] | None = None
    next_ex_mask: list[np.ndarray] | None = None
    # exclusive gradients of the last finished iteration, applied at the next forward
    pending_grads: list[np.ndarray] | None = None
    pending_route: Route | None = None
    pending_sets: list[IndexSet] | None = None
    pending_batch_mask: list[np.ndarray] | None = None
    pending_shard_mask: list[np.ndarray] | None = None
    blocking_bytes: list[int] = field(default_factory=list)


class PrioritizedEmbedding:
    """Collision rows are updated eagerly; exclusive rows update and prefetch off the critical path.

    Ops returned by :meth:`forward` are all side-channel work except the
    ``boot_*`` pair of the first iteration. The forward's embedding input
    depends on ``ex_prefetch_a2a`` from the previous forward and
    ``co_rows_a2a`` from the previous backward.
    """

    def __init__(self, table: ShardedEmbedding, world: World) -> None:
        if table.num_shards != world.world_size:
            raise EmbeddingError("one shard per rank required")
        self.table = table
        self.world = world
        self.ctx = IterationContext()

    def _sets(self, batch_ids: Sequence[np.ndarray]) -> list[IndexSet]:
        return [IndexSet(IdLayout.BATCH_MAJOR, JaggedTensor(np.asarray(v, dtype=ID_DTYPE), [len(v)]), r)
                for r, v in enumerate(batch_ids)]

    def _apply_pending(self, ops: list[CommOp]) -> None:
        c = self.ctx
        if c.pending_grads is None:
            return
        rb = _row_bytes(self.table)
        ex_batch = [~m for m in c.pending_batch_mask]
        g, op = to_shard_major_values(self.world, c.pending_route, c.pending_grads, rb, "ex_grad_a2a", "grad",
                                      masks=ex_batch)
        ops.append(op)
        for d, s in enumerate(c.pending_sets):
            ids = s.flat[~c.pending_shard_mask[d]]
            self.table.update(d, ids, g[d].reshape(-1, self.table.dim))
        c.pending_grads = c.pending_route = c.pending_sets = None
        c.pending_batch_mask = c.pending_shard_mask = None

    def forward(self, batch_ids: Sequence[np.ndarray],
                next_ids: Sequence[np.ndarray] | None) -> tuple[list[np.ndarray], list[CommOp]]:
        c = self.ctx
        if c.awaiting_backward:
            raise ProtocolError("forward called twice without backward")
        p = self.world.world_size
        rb = _row_bytes(self.table)
        ops: list[CommOp] = []
        if c.next_route is None:
            # bootstrap: blocking lookup of this iteration's rows
            sets = self._sets(batch_ids)
            c.shard_sets, c.route, op = to_shard_major(self.world, sets, self.table.total_rows)
            op = CommOp("boot_ids_a2a", op.category, op.us, op.nbytes, op.matrix)
            rows = [lookup(self.table, s) for s in c.shard_sets]
            merged, emb = to_batch_major_values(self.world, c.route, rows, rb, "boot_emb_a2a", "emb")
            ops += [op, emb]
        else:
            expect = [len(v) for v in batch_ids]
            if expect != c.next_route.src_sizes:
                raise ProtocolError("batch IDs differ from the ones routed during the previous forward")
            c.route, c.shard_sets = c.next_route, c.next_shard_sets
            c.ex_rows, c.ex_mask = c.next_ex_rows, c.next_ex_mask
            if c.co_rows is None:
                raise ProtocolError("collision rows of the previous backward are missing")
            merged = None

        # (1) deferred exclusive update from the previous iteration
        self._apply_pending(ops)
        # (2) route the next iteration's IDs
        nxt = next_ids if next_ids is not None else [np.empty(0, dtype=ID_DTYPE)] * p
        n_sets, n_route, op = to_shard_major(self.world, self._sets(nxt), self.table.total_rows)
        ops.append(op)
        # (3) collisions shard by shard
        co_shard, ex_next_shard = [], []
        for d in range(p):
            co, _, ex_next = compute_collision(c.shard_sets[d], n_sets[d])
            co_shard.append(np.isin(c.shard_sets[d].flat, co))
            ex_next_shard.append(np.isin(n_sets[d].flat, ex_next))
        # (4) prefetch exclusive rows of i+1 along with the per-occurrence mask
        rows = [self.table.lookup(d, n_sets[d].flat[ex_next_shard[d]]) for d in range(p)]
        ex_rows, op = to_batch_major_values(self.world, n_route, rows, rb, "ex_prefetch_a2a", "emb",
                                            shard_masks=ex_next_shard)
        masks, mop = to_batch_major_values(self.world, n_route, ex_next_shard, MASK_BYTES, "ex_mask", "emb",
                                           fill=False)
        ops.append(_fused_op(self.world, "ex_prefetch_a2a", "emb", op, mop))
        c.next_route, c.next_shard_sets = n_route, n_sets
        c.next_ex_shard_mask, c.next_ex_rows, c.next_ex_mask = ex_next_shard, ex_rows, masks
        # (5) collision mask of iteration i, batch-major, for splitting gradients
        c.co_shard_mask = co_shard
        c.co_batch_mask, op = to_batch_major_values(self.world, c.route, co_shard, MASK_BYTES, "mask_a2a", "ids",
                                                    fill=False)
        ops.append(op)

        if merged is None:
            merged = [np.where(c.ex_mask[s][:, None], c.ex_rows[s], c.co_rows[s]) for s in range(p)]
        c.co_rows = None
        c.awaiting_backward = True
        c.iteration += 1
        return merged, ops

    def backward(self, grads: Sequence[np.ndarray]) -> list[CommOp]:
        c = self.ctx
        if not c.awaiting_backward:
            raise ProtocolError("backward called before forward")
        p = self.world.world_size
        rb = _row_bytes(self.table)
        for s in range(p):
            if np.shape(grads[s]) != (c.route.src_sizes[s], self.table.dim):
                raise EmbeddingError(f"rank {s}: gradients {np.shape(grads[s])} do not match its "
                                     f"{c.route.src_sizes[s]} IDs")
        ops = []
        # collision gradients go first and are applied right away
        g, op = to_shard_major_values(self.world, c.route, grads, rb, "co_grad_a2a", "grad", masks=c.co_batch_mask)
        ops.append(op)
        for d in range(p):
            self.table.update(d, c.shard_sets[d].flat[c.co_shard_mask[d]], g[d].reshape(-1, self.table.dim))
        # refreshed collision rows for the next iteration's positions
        co_next = [~m for m in c.next_ex_shard_mask]
        rows = [self.table.lookup(d, c.next_shard_sets[d].flat[co_next[d]]) for d in range(p)]
        c.co_rows, op = to_batch_major_values(self.world, c.next_route, rows, rb, "co_rows_a2a", "emb",
                                              shard_masks=co_next)
        ops.append(op)
        c.blocking_bytes.append(sum(o.nbytes for o in ops))
        # exclusive gradients wait for the next forward
        c.pending_grads = [np.asarray(x) for x in grads]
        c.pending_route, c.pending_sets = c.route, c.shard_sets
        c.pending_batch_mask, c.pending_shard_mask = c.co_batch_mask, c.co_shard_mask
        c.awaiting_backward = False
        return ops

    def flush(self) -> list[CommOp]:
        """Apply outstanding exclusive gradients (end of training)."""
        if self.ctx.awaiting_backward:
            raise ProtocolError("flush with a forward still awaiting its backward")
        ops: list[CommOp] = []
        self._apply_pending(ops)
        return ops
