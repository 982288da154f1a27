"""Five-stage training loop over a sharded embedding and a replicated toy model.

All ranks advance together under one coordinator: numerics run eagerly, and
every compute span and collective is placed on a shared
:class:`~seqscale.sim.Timeline` so the loop also yields per-iteration timing
metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .balancer import Balancer
from .collectives import CollectiveError, World
from .embedding import (CommOp, EmbeddingError, ProtocolError, PrioritizedEmbedding, ShardedEmbedding,
                        SynchronizedEmbedding)
from .jagged import ID_DTYPE
from .sim import CostModel, MetricRecord, Timeline, exposed_comm, qps, straggler_pct
from .workload import Batch, Workload, measure_sparsity

HOOK_POINTS = ("data_load", "pre_forward", "post_forward", "post_backward", "optimizer_step", "metrics")
MODES = ("synchronized", "prioritized")


class PipelineError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None) -> None:
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class HookEvent:
    point: str
    iteration: int
    pipeline: Pipeline


class HookRegistry:
    def __init__(self, points: Sequence[str] = HOOK_POINTS) -> None:
        self._hooks: dict[str, list[Callable[[HookEvent], None]]] = {p: [] for p in points}
        self.counts: dict[str, int] = {p: 0 for p in points}

    def has(self, point: str) -> bool:
        return point in self._hooks

    def register(self, point: str, fn: Callable[[HookEvent], None]) -> None:
        if point not in self._hooks:
            raise PipelineError(f"unknown hook point {point!r}; expected one of {list(self._hooks)}")
        self._hooks[point].append(fn)

    def fire(self, point: str, event: HookEvent) -> None:
        self.counts[point] += 1
        for fn in self._hooks[point]:
            fn(event)


# -- model ----------------------------------------------------------------------


def _segment_sums(rows: np.ndarray, lens: np.ndarray) -> np.ndarray:
    out = np.zeros((lens.size, rows.shape[1]))
    nz = lens > 0
    if rows.shape[0]:
        starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
        out[nz] = np.add.reduceat(rows, starts[nz], axis=0)
    return out


class ToyModel:
    """Mean-pool each sample's UIH rows, then a linear read-out ``pooled @ W``.

    Loss over the global batch is ``sum((pred - y)**2) / N``.
    """

    def __init__(self, dim: int, seed: int = 0, scale: float = 0.1) -> None:
        self.W = np.random.default_rng(seed).normal(0.0, scale, size=(dim, 1))

    @staticmethod
    def pool(rows: np.ndarray, lens: np.ndarray) -> np.ndarray:
        lens = np.asarray(lens, dtype=np.int64)
        sums = _segment_sums(rows, lens)
        return sums / np.maximum(lens, 1)[:, None]

    @staticmethod
    def predict(pooled: np.ndarray, W: np.ndarray) -> np.ndarray:
        return (pooled @ W)[:, 0]

    @classmethod
    def loss(cls, rows: np.ndarray, lens: np.ndarray, labels: np.ndarray, W: np.ndarray,
             n_global: int | None = None) -> float:
        pred = cls.predict(cls.pool(rows, lens), W)
        n = len(labels) if n_global is None else n_global
        return float(((pred - labels) ** 2).sum() / n)

    @classmethod
    def local_grads(cls, rows: np.ndarray, lens: np.ndarray, labels: np.ndarray, W: np.ndarray,
                    n_global: int) -> tuple[np.ndarray, np.ndarray, float]:
        """``(dW_sum, row_grads, loss_sum)``.

        ``dW_sum`` is the local sum over samples, not yet divided by
        ``n_global``; row gradients are already final (one per occurrence).
        """
        lens = np.asarray(lens, dtype=np.int64)
        pooled = cls.pool(rows, lens)
        resid = cls.predict(pooled, W) - labels
        dW_sum = (2.0 * resid) @ pooled
        coef = 2.0 * resid / n_global / np.maximum(lens, 1)
        row_grads = np.repeat(coef, lens)[:, None] * W[:, 0][None, :]
        return dW_sum.reshape(-1, 1), row_grads, float((resid ** 2).sum())


def dense_grad_sync(world: World, grads: Sequence[np.ndarray],
                    local_counts: Sequence[int] | None = None) -> list[np.ndarray]:
    """Average dense gradients across ranks.

    Without ``local_counts`` every rank's gradient is weighted equally. With
    them, ``grads`` are per-rank sums and the result is the global-batch mean,
    which stays correct when ranks hold different numbers of samples.
    """
    summed = world.all_reduce_sum(grads)
    denom = world.world_size if local_counts is None else int(sum(local_counts))
    if denom <= 0:
        raise PipelineError("dense_grad_sync needs a positive sample count")
    return [s / denom for s in summed]


# -- configuration and results ------------------------------------------------------


@dataclass
class PipelineConfig:
    mode: str = "synchronized"
    balancer: bool = False
    partition: str = "fbs"
    alpha: float = 1.0
    prefetch_depth: int = 1
    dim: int = 8
    emb_lr: float = 0.05
    dense_lr: float = 0.05
    model_seed: int = 0
    cost: CostModel = field(default_factory=CostModel)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise PipelineError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dim < 1:
            raise PipelineError("dim must be >= 1")


@dataclass
class RunResult:
    records: list[MetricRecord]
    table: ShardedEmbedding
    W: np.ndarray
    losses: list[float]
    timeline: Timeline

    def checkpoint(self) -> bytes:
        """Table checkpoint with the dense weights appended (little-endian f64)."""
        return self.table.to_bytes() + np.ascontiguousarray(self.W, dtype="<f8").tobytes()

    @property
    def exposed_total_us(self) -> float:
        return sum(r.exposed_total_us for r in self.records)


def _flat_ids(batch: Batch) -> np.ndarray:
    if not batch.samples:
        return np.empty(0, dtype=ID_DTYPE)
    return np.concatenate([s.uih for s in batch.samples]).astype(ID_DTYPE, copy=False)


def _collision_between(cur: Sequence[np.ndarray], nxt: Sequence[np.ndarray]) -> float:
    a = np.unique(np.concatenate(cur)) if cur else np.empty(0, ID_DTYPE)
    b = np.unique(np.concatenate(nxt)) if nxt else np.empty(0, ID_DTYPE)
    if b.size == 0:
        return math.nan
    return float(np.intersect1d(a, b, assume_unique=True).size / b.size)


class Pipeline:
    def __init__(self, workload: Workload, config: PipelineConfig | None = None) -> None:
        self.config = config or PipelineConfig()
        self.config.validate()
        self.workload = workload
        spec = workload.spec
        self.num_ranks = spec.num_ranks
        self.num_iterations = len(workload.iterations)
        cost = self.config.cost
        self.world = World(self.num_ranks, cost.link, cost.mode)
        self.timeline = Timeline(self.num_ranks, cost.penalty)
        self.hooks = HookRegistry()
        self.buffer: dict[int, tuple[list[Batch], float]] = {}
        self.balancer: Balancer | None = None
        self.last_compute_us: list[float] | None = None
        self.table = ShardedEmbedding.init(spec.table_rows, self.config.dim, self.num_ranks,
                                           self.config.emb_lr, seed=self.config.model_seed)
        w = ToyModel(self.config.dim, seed=self.config.model_seed + 1).W
        self.replicas = [w.copy() for _ in range(self.num_ranks)]
        if self.config.balancer:
            self.balancer = Balancer(self.config.partition, self.config.alpha, self.config.prefetch_depth)
            self.balancer.install_hooks(self)

    @property
    def prioritized(self) -> bool:
        return self.config.mode == "prioritized"

    def raw_batches(self, k: int) -> list[Batch]:
        return self.workload.iterations[k]

    def _fire(self, point: str, i: int) -> None:
        self.hooks.fire(point, HookEvent(point, i, self))

    def take(self, k: int, iteration: int) -> list[Batch]:
        """Batch ``k`` as the model sees it, waiting for the balancer if needed."""
        if self.balancer is None:
            return self.raw_batches(k)
        if k not in self.buffer:
            raise PipelineError(f"batch {k} was never balanced", iteration)
        batches, ready = self.buffer.pop(k)
        for r in range(self.num_ranks):
            self.timeline.wait(r, ready, "balancer", iteration, op=f"consume_batch_{k}")
        return batches

    def _side(self, ops: Sequence[CommOp], i: int) -> dict[str, float]:
        ends = {}
        for op in ops:
            evs = self.timeline.collective(op.name, op.us, "side", op.category, i)
            ends[op.name] = evs[0].end
        return ends

    def _blocking(self, ops: Sequence[CommOp], i: int) -> None:
        for op in ops:
            self.timeline.blocking(op.name, op.us, op.category, i)

    def run(self) -> RunResult:
        cfg, tl, p = self.config, self.timeline, self.num_ranks
        cost = cfg.cost
        proto = (PrioritizedEmbedding if self.prioritized else SynchronizedEmbedding)(self.table, self.world)
        records: list[MetricRecord] = []
        losses: list[float] = []
        handles: dict[str, float] = {}
        prev_boundary = 0.0
        upcoming: list[Batch] | None = None
        spec = self.workload.spec
        for i in range(self.num_iterations):
            try:
                self._fire("data_load", i)
                if not self.prioritized or i == 0:
                    batches = self.take(i, i)
                else:
                    batches = upcoming
                ids = [_flat_ids(b) for b in batches]
                lens = [b.uih_lens for b in batches]
                self._fire("pre_forward", i)

                nxt_ids = None
                if self.prioritized:
                    upcoming = self.take(i + 1, i) if i + 1 < self.num_iterations else None
                    nxt_ids = [_flat_ids(b) for b in upcoming] if upcoming is not None else None
                    rows, ops = proto.forward(ids, nxt_ids)
                    self._blocking([o for o in ops if o.name.startswith("boot_")], i)
                    ready = max(handles.get("ex_prefetch_a2a", 0.0), handles.get("co_rows_a2a", 0.0))
                    handles.update(self._side([o for o in ops if not o.name.startswith("boot_")], i))
                    for r in range(p):
                        tl.wait(r, ready, "emb", i, op="await_embeddings")
                else:
                    rows, ops = proto.forward(ids)
                    self._blocking(ops, i)

                compute = [cost.compute_time(l) for l in lens]
                for r in range(p):
                    tl.compute(r, "forward", compute[r] * cost.forward_fraction, i)
                self._fire("post_forward", i)
                # the read-out layer's gradient is ready first, so its all-reduce overlaps backward
                w_bytes = int(self.replicas[0].nbytes)
                ar = tl.collective("dense_allreduce", self.world.all_reduce_time(w_bytes), "dense", "grad", i)
                for r in range(p):
                    tl.compute(r, "backward", compute[r] * (1.0 - cost.forward_fraction), i)
                self.last_compute_us = compute

                n_global = sum(len(b) for b in batches)
                labels = [b.labels for b in batches]
                W = self.replicas[0]
                grads = [ToyModel.local_grads(rows[r], lens[r], labels[r], W, max(n_global, 1)) for r in range(p)]
                losses.append(sum(g[2] for g in grads) / max(n_global, 1))
                emb_ops = proto.backward([g[1] for g in grads])
                if self.prioritized:
                    handles.update(self._side(emb_ops, i))
                else:
                    self._blocking(emb_ops, i)
                self._fire("post_backward", i)

                dW = self.world.all_reduce_sum([g[0] for g in grads])
                for r in range(p):
                    tl.wait(r, ar[r].end, "grad", i, op="await_dense_allreduce")
                    self.replicas[r] = self.replicas[r] - cfg.dense_lr * (dW[r] / max(n_global, 1))
                if any(not np.array_equal(self.replicas[0], w) for w in self.replicas[1:]):
                    raise PipelineError("dense replicas diverged", i)
                self._fire("optimizer_step", i)
                for r in range(p):
                    tl.compute(r, "optimizer", cost.optimizer_us, i)
                self._fire("metrics", i)
                for r in range(p):
                    tl.compute(r, "metrics", cost.metrics_us, i, channel="aux")

                boundary = max(tl.now(r) for r in range(p))
                it = tl.iteration(i)
                dur = boundary - prev_boundary
                exp = exposed_comm(it)
                spars = [measure_sparsity(l) for l in lens if l.size and l.any()]
                records.append(MetricRecord(
                    iteration=i, rank_count=p, batch_size=spec.batch_size, max_uih=spec.max_uih,
                    mode=cfg.mode, sparsity=float(np.mean(spars)) if spars else 0.0,
                    straggler_pct=straggler_pct(it, dur) if dur > 0 else 0.0,
                    collision_pct=100.0 * _collision_between(ids, nxt_ids) if nxt_ids is not None else (
                        100.0 * _collision_between(ids, [_flat_ids(b) for b in self.raw_batches(i + 1)])
                        if i + 1 < self.num_iterations else math.nan),
                    exposed_ids_us=exp["ids"], exposed_emb_us=exp["emb"], exposed_grad_us=exp["grad"],
                    exposed_balancer_us=exp["balancer"], iteration_us=dur,
                    qps=qps(n_global, dur) if dur > 0 else 0.0,
                ))
                prev_boundary = boundary
            except (EmbeddingError, ProtocolError, CollectiveError, ValueError, RuntimeError) as e:
                if isinstance(e, PipelineError):
                    raise
                raise PipelineError(str(e), i) from e
        flush_ops = proto.flush()
        if flush_ops:
            self._side(flush_ops, self.num_iterations - 1)
        return RunResult(records, self.table, self.replicas[0], losses, tl)


def run(workload: Workload, config: PipelineConfig | None = None) -> RunResult:
    return Pipeline(workload, config).run()
