"""Logical-time timeline, cost model, and the headline metrics.

Each rank owns a set of channels (``main`` for compute and blocking waits,
``side`` for the embedding protocol, ``balancer``, ``dense``, ``aux``). Work on
one channel is serialized; different channels overlap freely. A collective
starts once every participating rank has issued it and its channel is free,
so a fast rank waiting on a slow one shows up as a ``wait`` on ``main``.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .collectives import LinkParams, Mode
from .partition import make_partitioner, metas_from_lengths
from .workload import WorkloadSpec, draw_shape, measure_sparsity

SCHEMA_VERSION = 1
CATEGORIES = ("ids", "emb", "grad", "balancer")


class SimError(ValueError):
    pass


@dataclass
class CostModel:
    """Compute durations in microseconds; communication from ``link``."""

    c0: float = 50.0
    c1: float = 0.01
    c2: float = 0.0
    forward_fraction: float = 1.0 / 3.0
    optimizer_us: float = 20.0
    metrics_us: float = 10.0
    link: LinkParams = field(default_factory=LinkParams)
    mode: Mode = Mode.SM_FREE

    @classmethod
    def attention(cls, **kw) -> CostModel:
        return cls(c2=1e-6, **kw)

    def compute_time(self, uih_lens: Sequence[int] | np.ndarray) -> float:
        lens = np.asarray(uih_lens, dtype=np.float64)
        return self.c0 + self.c1 * float(lens.sum()) + self.c2 * float((lens * lens).sum())

    @property
    def penalty(self) -> float:
        """Compute stretch while fused collectives run alongside."""
        return self.link.overlap_penalty if self.mode is Mode.FUSED else 1.0


@dataclass(frozen=True)
class Event:
    seq: int
    rank: int
    op: str
    channel: str
    start: float
    end: float
    kind: str  # compute | comm | wait
    category: str | None = None
    iteration: int = -1
    deps: tuple[int, ...] = ()

    @property
    def duration(self) -> float:
        return self.end - self.start


class Timeline:
    def __init__(self, num_ranks: int, penalty: float = 1.0) -> None:
        if num_ranks < 1:
            raise SimError("need at least one rank")
        self.num_ranks = num_ranks
        self.penalty = penalty
        self.events: list[Event] = []
        self._free = [defaultdict(float) for _ in range(num_ranks)]
        self._side_busy: list[list[tuple[float, float]]] = [[] for _ in range(num_ranks)]

    def now(self, rank: int, channel: str = "main") -> float:
        return self._free[rank][channel]

    def _add(self, **kw) -> Event:
        ev = Event(seq=len(self.events), **kw)
        self.events.append(ev)
        return ev

    def _dep_end(self, deps: Iterable[Event]) -> tuple[float, tuple[int, ...]]:
        deps = list(deps)
        return max((d.end for d in deps), default=0.0), tuple(d.seq for d in deps)

    def compute(self, rank: int, op: str, duration: float, iteration: int = -1,
                after: Iterable[Event] = (), channel: str = "main") -> Event:
        if duration < 0:
            raise SimError(f"negative duration for {op}")
        ready, dep_ids = self._dep_end(after)
        start = max(self._free[rank][channel], ready)
        if channel != "main":
            start = max(start, self._free[rank]["main"])  # issued from the main loop
        if self.penalty > 1.0 and duration > 0:
            # stretch by the share of the window spent next to side-channel traffic
            overlap = sum(max(0.0, min(e, start + duration) - max(s, start)) for s, e in self._side_busy[rank])
            duration += (self.penalty - 1.0) * overlap
        ev = self._add(rank=rank, op=op, channel=channel, start=start, end=start + duration, kind="compute",
                       iteration=iteration, deps=dep_ids)
        self._free[rank][channel] = ev.end
        return ev

    def collective(self, op: str, duration: float, channel: str, category: str | None = None,
                   iteration: int = -1, issue: Sequence[float] | float | None = None,
                   after: Iterable[Event] = ()) -> list[Event]:
        """All ranks join; returns one comm event per rank (same interval)."""
        if issue is None:
            issue = [self._free[r]["main"] for r in range(self.num_ranks)]
        elif np.isscalar(issue):
            issue = [float(issue)] * self.num_ranks
        ready, dep_ids = self._dep_end(after)
        start = max(max(issue[r], self._free[r][channel]) for r in range(self.num_ranks))
        start = max(start, ready)
        end = start + duration
        out = []
        for r in range(self.num_ranks):
            out.append(self._add(rank=r, op=op, channel=channel, start=start, end=end, kind="comm",
                                 category=category, iteration=iteration, deps=dep_ids))
            self._free[r][channel] = end
            if channel != "main" and duration > 0:
                self._side_busy[r].append((start, end))
        return out

    def wait(self, rank: int, until: float, category: str | None, iteration: int = -1,
             op: str = "wait", after: Iterable[Event] = ()) -> Event | None:
        """Block ``main`` until ``until``; returns the wait event if any time passed."""
        _, dep_ids = self._dep_end(after)
        start = self._free[rank]["main"]
        if until <= start:
            return None
        ev = self._add(rank=rank, op=op, channel="main", start=start, end=until, kind="wait",
                       category=category, iteration=iteration, deps=dep_ids)
        self._free[rank]["main"] = until
        return ev

    def blocking(self, op: str, duration: float, category: str, iteration: int = -1) -> list[Event]:
        """A collective on ``main``: every rank waits from its own issue time to the end."""
        issue = [self._free[r]["main"] for r in range(self.num_ranks)]
        start = max(issue)
        out = []
        for r in range(self.num_ranks):
            ev = self.wait(r, start + duration, category, iteration, op)
            if ev is not None:
                out.append(ev)
        return out

    def iteration(self, i: int) -> IterationTimeline:
        return IterationTimeline(self.num_ranks, [e for e in self.events if e.iteration == i])

    def check_causality(self) -> None:
        by_seq = {e.seq: e for e in self.events}
        for e in self.events:
            for d in e.deps:
                if by_seq[d].end > e.start + 1e-9:
                    raise SimError(f"event {e.op}@{e.rank} starts before dependency {by_seq[d].op} ends")
        lanes: dict[tuple[int, str], list[Event]] = defaultdict(list)
        for e in self.events:
            lanes[(e.rank, e.channel)].append(e)
        for (r, ch), evs in lanes.items():
            evs.sort(key=lambda e: (e.start, e.seq))
            for a, b in zip(evs, evs[1:]):
                if b.start < a.end - 1e-9:
                    raise SimError(f"overlapping events on rank {r} channel {ch}: {a.op} and {b.op}")


@dataclass
class IterationTimeline:
    num_ranks: int
    events: list[Event]

    def _main(self) -> list[Event]:
        return [e for e in self.events if e.channel == "main"]

    @property
    def start(self) -> float:
        return min((e.start for e in self._main()), default=0.0)

    @property
    def end(self) -> float:
        return max((e.end for e in self._main()), default=0.0)

    @property
    def duration(self) -> float:
        return self.end - self.start

    def busy(self, rank: int) -> float:
        return sum(e.duration for e in self._main() if e.rank == rank and e.kind == "compute")


def straggler_pct(tl: IterationTimeline, duration: float | None = None) -> float:
    """Mean idle share of the iteration over ranks, in percent."""
    d = tl.duration if duration is None else duration
    if d <= 0:
        raise SimError("zero-duration iteration")
    if tl.num_ranks == 1:
        return 0.0
    idle = [(d - tl.busy(r)) / d for r in range(tl.num_ranks)]
    return 100.0 * float(np.mean(idle))


def exposed_comm(tl: IterationTimeline) -> dict[str, float]:
    """Mean over ranks of blocking waits on ``main``, by category."""
    out = {c: 0.0 for c in CATEGORIES}
    for e in tl.events:
        if e.channel == "main" and e.kind == "wait" and e.category in out:
            out[e.category] += e.duration
    return {c: v / tl.num_ranks for c, v in out.items()}


def qps(samples: int, duration_us: float) -> float:
    if duration_us <= 0:
        raise SimError("qps needs a positive duration")
    return samples / (duration_us * 1e-6)


# -- metric records -------------------------------------------------------------


@dataclass
class MetricRecord:
    iteration: int
    rank_count: int
    batch_size: int
    max_uih: int
    mode: str
    sparsity: float
    straggler_pct: float
    collision_pct: float
    exposed_ids_us: float
    exposed_emb_us: float
    exposed_grad_us: float
    exposed_balancer_us: float
    iteration_us: float
    qps: float
    schema_version: int = SCHEMA_VERSION

    @property
    def exposed_total_us(self) -> float:
        return self.exposed_ids_us + self.exposed_emb_us + self.exposed_grad_us + self.exposed_balancer_us


FIELDS = [f.name for f in fields(MetricRecord)]


def write_csv(records: Sequence[MetricRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: _fmt(v) for k, v in asdict(r).items()})


def write_jsonl(records: Sequence[MetricRecord], path: str | Path, header: dict | None = None) -> None:
    with open(path, "w") as f:
        if header is not None:
            f.write(json.dumps({"config": header}, sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def write_gnuplot(records: Sequence[MetricRecord], path: str | Path) -> None:
    numeric = [k for k in FIELDS if k != "mode"]
    with open(path, "w") as f:
        f.write("# " + " ".join(numeric) + "\n")
        for r in records:
            d = asdict(r)
            f.write(" ".join(_fmt(d[k]) for k in numeric) + "\n")


def read_csv(path: str | Path) -> list[MetricRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            kw = {}
            for fd in fields(MetricRecord):
                v = row[fd.name]
                kw[fd.name] = v if fd.type in ("str", str) else (int(v) if fd.type in ("int", int) else float(v))
            out.append(MetricRecord(**kw))
    return out


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# -- straggler experiments ------------------------------------------------------


def barrier_timeline(compute_us: Sequence[Sequence[float]]) -> Timeline:
    """Per iteration: each rank computes, then all meet at a zero-cost barrier."""
    compute_us = np.asarray(compute_us, dtype=np.float64)
    tl = Timeline(compute_us.shape[1])
    for i, row in enumerate(compute_us):
        for r, c in enumerate(row):
            tl.compute(r, "compute", float(c), iteration=i)
        tl.blocking("barrier", 0.0, "grad", iteration=i)
    return tl


@dataclass
class StragglerResult:
    straggler_pct: float
    sparsity: float
    per_iteration: list[float]


def straggler_experiment(spec: WorkloadSpec, partition: str = "none", cost: CostModel | None = None,
                         alpha: float = 1.0) -> StragglerResult:
    """Straggler % of a compute + barrier loop over the workload's length draws."""
    cost = cost or CostModel()
    shape = draw_shape(spec)
    part = make_partitioner(partition, alpha)
    times, spars = [], []
    for i in range(spec.num_iterations):
        lens = shape.uih_lens[i]
        spars.extend(measure_sparsity(row) for row in lens if row.any())
        if partition == "none":
            groups = [row for row in lens]
        else:
            metas = metas_from_lengths(lens)
            plan = part(metas, spec.num_ranks)
            flat = lens.reshape(-1)
            groups = [flat[idx] if idx else np.empty(0) for idx in plan.dest_order]
        times.append([cost.compute_time(g) for g in groups])
    tl = barrier_timeline(times)
    per = [straggler_pct(tl.iteration(i)) for i in range(spec.num_iterations)]
    return StragglerResult(float(np.mean(per)), float(np.mean(spars)) if spars else 0.0, per)
