"""Three-stage sample balancing, attached to the training loop through hooks.

Stage 1 gathers every rank's UIH lengths and candidate counts, stage 2
gathers the flattened candidate lengths (its buffer size comes from stage 1),
and stage 3 ships samples according to the partition plan. The stages of one
future batch are spread over the optimizer step, forward, and backward hooks,
so their collectives run on the ``balancer`` channel while the model computes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Sequence

import numpy as np

from .collectives import World
from .partition import AutoTuneState, PartitionPlan, autotune_update, make_partitioner, metas_from_lengths
from .workload import Batch, decode_sample, encode_sample, pack_records, unpack_records

if TYPE_CHECKING:
    from .pipeline import HookEvent, Pipeline


class BalancerError(RuntimeError):
    pass


class Stage(enum.IntEnum):
    IDLE = 0
    LENGTHS_GATHERED = 1
    CANDIDATES_GATHERED = 2
    SHUFFLED = 3


def _same_everywhere(views: list[list[Any]]) -> list[Any]:
    first = views[0]
    for v in views[1:]:
        if any(not np.array_equal(a, b) for a, b in zip(first, v)):
            raise BalancerError("ranks disagree on gathered metadata")
    return first


def stage1_gather_lengths(world: World, batches: Sequence[Batch]) -> tuple[np.ndarray, np.ndarray, float]:
    """``(L_uih, N_can)`` as ``[ranks, batch]`` matrices, plus the gather time."""
    sizes = {len(b) for b in batches}
    if len(sizes) != 1:
        raise BalancerError(f"ingestion batch sizes differ across ranks: {sorted(sizes)}")
    chunks = [np.stack([b.uih_lens, b.num_candidates]) if len(b) else np.zeros((2, 0), np.int64) for b in batches]
    views = world.all_gather(chunks)
    got = _same_everywhere(views)
    us = world.last_us
    return np.stack([g[0] for g in got]), np.stack([g[1] for g in got]), us


def stage2_gather_candidate_lengths(world: World, batches: Sequence[Batch], n_can: np.ndarray) -> tuple[np.ndarray, float]:
    """Flattened candidate lengths in (rank, sample, candidate) order."""
    expected = [int(x) * 8 for x in np.asarray(n_can).sum(axis=1)]
    chunks = [np.asarray(b.candidate_lens, dtype=np.int64) for b in batches]
    bad = [r for r, c in enumerate(chunks) if c.nbytes != expected[r]]
    if bad:
        raise BalancerError(f"candidate lengths on ranks {bad} disagree with the stage-1 counts")
    views = world.all_gather(chunks, sizes=expected)
    got = _same_everywhere(views)
    return (np.concatenate(got) if got else np.empty(0, np.int64)), world.last_us


def stage3_shuffle(world: World, batches: Sequence[Batch], plan: PartitionPlan) -> tuple[list[Batch], float]:
    """Move samples per ``plan``; each rank ends up with them in plan order."""
    p = world.world_size
    send_idx = plan.send_samples
    send = [[pack_records([encode_sample(batches[a].samples[l], rank=a, index=l) for l in send_idx[a][b]])
             for b in range(p)] for a in range(p)]
    recv = world.all_to_all(send)
    us = world.jagged_all_to_all_time([[len(x) for x in row] for row in send])
    out = []
    for b in range(p):
        got: dict[tuple[int, int], Any] = {}
        for a in range(p):
            for body in unpack_records(recv[b][a]):
                sample, _, rank, index = decode_sample(body)
                got[(rank, index)] = sample
        want = [plan.origins[g] for g in plan.dest_order[b]]
        if sorted(got) != sorted(want):
            raise BalancerError(f"rank {b} received samples {sorted(got)[:4]}... but the plan assigns {want[:4]}...")
        out.append(Batch([got[k] for k in want], rank=b))
    return out, us


@dataclass
class BalancerState:
    batch_index: int
    stage: Stage = Stage.IDLE
    l_uih: np.ndarray | None = None
    n_can: np.ndarray | None = None
    l_can: np.ndarray | None = None
    plan: PartitionPlan | None = None
    balanced: list[Batch] | None = None
    end_time: float = 0.0

    def advance(self, to: Stage) -> None:
        if to != self.stage + 1:
            raise BalancerError(f"batch {self.batch_index}: cannot go from {self.stage.name} to {to.name}")
        self.stage = to


class Balancer:
    """Hook-driven balancer.

    ``prefetch_depth`` is how many iterations ahead of consumption the stages
    run. In prioritized mode batches are consumed one forward early (their IDs
    are routed during the previous forward), so the balancer looks one more
    batch ahead.
    """

    def __init__(self, partition: str = "fbs", alpha: float = 1.0, prefetch_depth: int = 1) -> None:
        if prefetch_depth < 1:
            raise BalancerError("prefetch_depth must be >= 1")
        self.partition = partition
        self.alpha = alpha
        self.prefetch_depth = prefetch_depth
        self._plan_fn = make_partitioner(partition, alpha)
        self.tune: AutoTuneState | None = None
        self.pipeline: Pipeline | None = None
        self.inflight: dict[int, BalancerState] = {}
        self.fired: dict[str, int] = {"optimizer_step": 0, "pre_forward": 0, "post_forward": 0}
        self.trace: list[tuple[str, int, int, float, float]] = []  # (stage, iteration, batch, start, end)

    @property
    def lookahead(self) -> int:
        extra = 1 if self.pipeline is not None and self.pipeline.prioritized else 0
        return self.prefetch_depth + extra

    def install_hooks(self, pipeline: Pipeline) -> None:
        hooks = getattr(pipeline, "hooks", None)
        needed = ("data_load", "optimizer_step", "pre_forward", "post_forward", "metrics")
        if hooks is None or any(not hooks.has(p) for p in needed):
            raise BalancerError("pipeline does not expose the required hook points")
        self.pipeline = pipeline
        hooks.register("data_load", self._on_data_load)
        hooks.register("optimizer_step", self._on_optimizer_step)
        hooks.register("pre_forward", self._on_pre_forward)
        hooks.register("post_forward", self._on_post_forward)
        hooks.register("metrics", self._on_metrics)

    # -- non-hook entry points --

    def plan(self, l_uih: np.ndarray, n_can: np.ndarray, l_can: np.ndarray) -> PartitionPlan:
        metas = metas_from_lengths(l_uih, n_can, l_can)
        if self.partition == "vbs" and self.tune is None:
            self.tune = AutoTuneState.uniform(l_uih.shape[0], l_uih.shape[1])
        return self._plan_fn(metas, l_uih.shape[0], self.tune)

    def balance(self, world: World, batches: Sequence[Batch]) -> list[Batch]:
        """All three stages back to back, untimed."""
        l_uih, n_can, _ = stage1_gather_lengths(world, batches)
        l_can, _ = stage2_gather_candidate_lengths(world, batches, n_can)
        out, _ = stage3_shuffle(world, batches, self.plan(l_uih, n_can, l_can))
        return out

    def warmup(self) -> None:
        pl = self.pipeline
        for k in range(min(self.lookahead, pl.num_iterations)):
            pl.buffer[k] = (self.balance(pl.world, pl.raw_batches(k)), 0.0)

    # -- hooks --

    def _issue(self, name: str, us: float, state: BalancerState, iteration: int) -> None:
        evs = self.pipeline.timeline.collective(f"balancer_{name}", us, "balancer", "balancer", iteration)
        state.end_time = evs[0].end
        self.trace.append((name, iteration, state.batch_index, evs[0].start, evs[0].end))

    def _start(self, target: int, iteration: int) -> None:
        pl = self.pipeline
        if target >= pl.num_iterations or target in self.inflight or target in pl.buffer:
            return
        st = BalancerState(target)
        st.l_uih, st.n_can, us = stage1_gather_lengths(pl.world, pl.raw_batches(target))
        st.advance(Stage.LENGTHS_GATHERED)
        self._issue("stage1", us, st, iteration)
        self.inflight[target] = st

    def _on_data_load(self, ev: HookEvent) -> None:
        if ev.iteration == 0:
            self.warmup()
            self._start(self.lookahead, -1)

    def _on_optimizer_step(self, ev: HookEvent) -> None:
        self.fired["optimizer_step"] += 1
        self._start(ev.iteration + 1 + self.lookahead, ev.iteration)

    def _on_pre_forward(self, ev: HookEvent) -> None:
        self.fired["pre_forward"] += 1
        st = self.inflight.get(ev.iteration + self.lookahead)
        if st is None:
            return
        pl = self.pipeline
        st.l_can, us = stage2_gather_candidate_lengths(pl.world, pl.raw_batches(st.batch_index), st.n_can)
        st.advance(Stage.CANDIDATES_GATHERED)
        self._issue("stage2", us, st, ev.iteration)

    def _on_post_forward(self, ev: HookEvent) -> None:
        self.fired["post_forward"] += 1
        st = self.inflight.get(ev.iteration + self.lookahead)
        if st is None:
            return
        if st.stage is not Stage.CANDIDATES_GATHERED:
            raise BalancerError(f"batch {st.batch_index}: shuffle before candidate lengths were gathered")
        pl = self.pipeline
        st.plan = self.plan(st.l_uih, st.n_can, st.l_can)
        st.balanced, us = stage3_shuffle(pl.world, pl.raw_batches(st.batch_index), st.plan)
        st.advance(Stage.SHUFFLED)
        self._issue("stage3", us, st, ev.iteration)
        pl.buffer[st.batch_index] = (st.balanced, st.end_time)
        del self.inflight[st.batch_index]

    def _on_metrics(self, ev: HookEvent) -> None:
        if self.partition == "vbs" and self.tune is not None:
            times = ev.pipeline.last_compute_us
            if times is not None and len(times) == len(self.tune.local_batch_size) and min(times) > 0:
                self.tune = autotune_update(self.tune, times)
