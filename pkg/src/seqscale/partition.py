"""Partitioners that map the globally gathered samples onto ranks.

Every rank evaluates the same partitioner on the same gathered metadata, so
plans must be pure functions of their inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class PartitionError(ValueError):
    """Bad partitioner input or a plan that violates its invariants."""


@dataclass(frozen=True)
class GlobalSampleMeta:
    origin_rank: int
    local_index: int
    uih_len: int
    num_candidates: int = 0
    candidate_lens: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.uih_len < 0:
            raise PartitionError(f"negative uih_len for sample ({self.origin_rank}, {self.local_index})")
        if len(self.candidate_lens) != self.num_candidates:
            raise PartitionError(
                f"sample ({self.origin_rank}, {self.local_index}): {self.num_candidates} candidates "
                f"but {len(self.candidate_lens)} lengths"
            )


def metas_from_lengths(uih_lens: np.ndarray, num_candidates: np.ndarray | None = None,
                       candidate_lens: np.ndarray | None = None) -> list[GlobalSampleMeta]:
    """Build metas from ``[ranks, batch]`` gathered tensors (Alg. inputs L_uih, N_can, L_can)."""
    uih_lens = np.asarray(uih_lens)
    ranks, per_rank = uih_lens.shape
    if num_candidates is None:
        return [GlobalSampleMeta(r, b, int(uih_lens[r, b])) for r in range(ranks) for b in range(per_rank)]
    ncan = np.asarray(num_candidates).reshape(-1)
    clens = np.asarray(candidate_lens if candidate_lens is not None else [], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(ncan)])
    if starts[-1] != clens.size:
        raise PartitionError(f"sum(num_candidates)={int(starts[-1])} but {clens.size} candidate lengths")
    out = []
    for j, n in enumerate(ncan):
        r, b = divmod(j, per_rank)
        out.append(GlobalSampleMeta(r, b, int(uih_lens[r, b]), int(n), tuple(int(x) for x in clens[starts[j]: starts[j + 1]])))
    return out


@dataclass
class PartitionPlan:
    """Destination rank of every gathered sample.

    ``dest_order[d]`` lists global sample indices (positions in the metas list)
    in the order rank ``d`` will hold them.
    """

    num_ranks: int
    dest_order: list[list[int]]
    origins: list[tuple[int, int]]  # global index -> (origin_rank, local_index)

    @property
    def assignment(self) -> np.ndarray:
        a = np.full(len(self.origins), -1, dtype=np.int64)
        for d, idx in enumerate(self.dest_order):
            a[idx] = d
        return a

    @property
    def send_samples(self) -> list[list[list[int]]]:
        """``send[a][b]``: local indices on rank ``a`` shipped to rank ``b``, in ``b``'s order."""
        send = [[[] for _ in range(self.num_ranks)] for _ in range(self.num_ranks)]
        for d, idx in enumerate(self.dest_order):
            for g in idx:
                a, local = self.origins[g]
                send[a][d].append(local)
        return send

    @property
    def recv_samples(self) -> list[list[list[int]]]:
        """``recv[b][a]``: local indices (on ``a``) that rank ``b`` receives from ``a``."""
        send = self.send_samples
        return [[send[a][b] for a in range(self.num_ranks)] for b in range(self.num_ranks)]

    def sizes(self) -> list[int]:
        return [len(d) for d in self.dest_order]

    def tokens(self, metas: Sequence[GlobalSampleMeta]) -> list[int]:
        return [sum(metas[g].uih_len for g in idx) for idx in self.dest_order]

    def is_identity(self) -> bool:
        return all(self.origins[g][0] == d for d, idx in enumerate(self.dest_order) for g in idx)


def validate_plan(plan: PartitionPlan, metas: Sequence[GlobalSampleMeta], num_ranks: int,
                  fixed_batch: int | None = None) -> PartitionPlan:
    problems = []
    if plan.num_ranks != num_ranks or len(plan.dest_order) != num_ranks:
        problems.append(f"plan covers {len(plan.dest_order)} ranks, expected {num_ranks}")
    seen = [g for idx in plan.dest_order for g in idx]
    counts = np.bincount(np.asarray(seen, dtype=np.int64), minlength=len(metas)) if seen else np.zeros(len(metas), int)
    if any(g < 0 or g >= len(metas) for g in seen):
        problems.append("plan references samples outside the gathered set")
    else:
        missing = np.flatnonzero(counts == 0)
        dup = np.flatnonzero(counts > 1)
        if missing.size:
            problems.append(f"every sample assigned exactly once: samples {missing[:8].tolist()} unassigned")
        if dup.size:
            problems.append(f"every sample assigned exactly once: samples {dup[:8].tolist()} duplicated")
    if fixed_batch is not None:
        bad = [d for d, idx in enumerate(plan.dest_order) if len(idx) != fixed_batch]
        if bad:
            problems.append(f"fixed batch size {fixed_batch} violated on ranks {bad}")
    send, recv = plan.send_samples, plan.recv_samples
    if any(send[a][b] != recv[b][a] for a in range(plan.num_ranks) for b in range(plan.num_ranks)):
        problems.append("send/recv lists inconsistent")
    if problems:
        raise PartitionError("invalid partition plan: " + "; ".join(problems))
    return plan


def _plan_from_order(metas: Sequence[GlobalSampleMeta], num_ranks: int, dest_order: list[list[int]]) -> PartitionPlan:
    return PartitionPlan(num_ranks, dest_order, [(m.origin_rank, m.local_index) for m in metas])


def sorted_order(metas: Sequence[GlobalSampleMeta]) -> list[int]:
    """Global indices sorted by UIH length descending, ties by (origin_rank, local_index)."""
    return sorted(range(len(metas)), key=lambda g: (-metas[g].uih_len, metas[g].origin_rank, metas[g].local_index))


def identity_partition(metas: Sequence[GlobalSampleMeta], num_ranks: int, runtime_info: Any = None) -> PartitionPlan:
    dest = [[] for _ in range(num_ranks)]
    for g in sorted(range(len(metas)), key=lambda g: (metas[g].origin_rank, metas[g].local_index)):
        dest[metas[g].origin_rank].append(g)
    return _plan_from_order(metas, num_ranks, dest)


# -- fixed batch size ---------------------------------------------------------


def snake_rank(k: int, n: int) -> int:
    """Rank of the ``k``-th sorted sample under the zig-zag deal."""
    lap, pos = divmod(k, n)
    return pos if lap % 2 == 0 else n - 1 - pos


def fbs_partition(metas: Sequence[GlobalSampleMeta], num_ranks: int, runtime_info: Any = None) -> PartitionPlan:
    """Sort by UIH length and deal samples to ranks in snake order."""
    if num_ranks < 1 or len(metas) % num_ranks:
        raise PartitionError(f"{len(metas)} samples cannot be split evenly over {num_ranks} ranks")
    dest = [[] for _ in range(num_ranks)]
    for k, g in enumerate(sorted_order(metas)):
        dest[snake_rank(k, num_ranks)].append(g)
    return _plan_from_order(metas, num_ranks, dest)


# -- variable batch size ------------------------------------------------------


def min_max_contiguous_split(weights: np.ndarray, parts: int) -> tuple[list[int], float]:
    """Exact split of ``weights`` into ``parts`` non-empty contiguous segments
    minimizing the largest segment sum.

    Returns the segment sizes and the optimal maximum. Requires non-negative
    weights; among equal optima the earlier split point wins.
    Runs the standard DP over prefix sums, with each row's inner minimization
    resolved by binary search (the left term is non-decreasing in the split
    point, the right term non-increasing).
    """
    w = np.asarray(weights)
    m = w.size
    if parts < 1 or parts > m:
        raise PartitionError(f"cannot split {m} samples into {parts} non-empty segments")
    prefix = np.concatenate([[0], np.cumsum(w)])
    inf = np.inf
    # best[j] = optimal max over the first j items using k segments
    best = np.full(m + 1, inf)
    best[1:] = prefix[1:]  # k = 1
    choice = [None]
    for k in range(2, parts + 1):
        j = np.arange(m + 1)
        # split i in [k-1, j-1]; left(i) = best[i], right(i) = prefix[j] - prefix[i]
        # crossing: smallest i with best[i] + prefix[i] >= prefix[j]
        key = best + prefix
        key[: k - 1] = -inf  # i < k-1 infeasible for left, but keep monotone
        key = np.maximum.accumulate(key)
        cross = np.searchsorted(key, prefix, side="left")
        lo = np.full(m + 1, k - 1)
        hi = j - 1
        cands = []
        for i in (cross - 1, cross):
            ic = np.clip(i, lo, np.maximum(hi, lo))
            cands.append((ic, np.maximum(best[ic], prefix - prefix[ic])))
        (i0, v0), (i1, v1) = cands
        take1 = v1 < v0
        split = np.where(take1, i1, i0)
        val = np.where(take1, v1, v0)
        feasible = j >= k
        new = np.where(feasible, val, inf)
        split = np.where(feasible, split, -1)
        best = new
        choice.append(split)
    sizes = []
    j = m
    for k in range(parts, 1, -1):
        i = int(choice[k - 1][j])
        sizes.append(j - i)
        j = i
    sizes.append(j)
    sizes.reverse()
    return sizes, float(best[m])


def brute_force_split(weights: Sequence[float], parts: int) -> float:
    """Exhaustive minimum of the max segment sum (test oracle)."""
    m = len(weights)
    best = float("inf")
    for cuts in itertools.combinations(range(1, m), parts - 1):
        bounds = (0, *cuts, m)
        best = min(best, max(sum(weights[a:b]) for a, b in zip(bounds, bounds[1:])))
    return best


@dataclass
class AutoTuneState:
    """Per-rank batch-size targets driven by execution-time feedback.

    ``local_batch_size`` starts at the ingestion batch size on every rank; its
    deviation from that baseline shifts VBS segment boundaries.
    """

    local_batch_size: list[int]
    ema_local_time: list[float] | None = None
    ema_global_time: float | None = None
    step: int = 1
    delta: float = 0.05
    decay: float = 0.9
    baseline: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.local_batch_size = [int(x) for x in self.local_batch_size]
        if not self.baseline:
            self.baseline = list(self.local_batch_size)
        if min(self.local_batch_size) < 1:
            raise PartitionError("local_batch_size must be >= 1 on every rank")

    @classmethod
    def uniform(cls, num_ranks: int, batch_size: int, **kw) -> AutoTuneState:
        return cls([batch_size] * num_ranks, **kw)

    @property
    def bias(self) -> list[int]:
        return [a - b for a, b in zip(self.local_batch_size, self.baseline)]


def autotune_update(tune: AutoTuneState, local_time: Sequence[float], global_mean_time: float | None = None) -> AutoTuneState:
    """One feedback step; ``local_time`` holds every rank's last execution time."""
    times = np.asarray(local_time, dtype=np.float64)
    if times.size != len(tune.local_batch_size):
        raise PartitionError("need one execution time per rank")
    if np.any(times <= 0):
        raise PartitionError("execution times must be positive")
    g = float(times.mean()) if global_mean_time is None else float(global_mean_time)
    if g <= 0:
        raise PartitionError("execution times must be positive")
    if tune.ema_local_time is None:
        ema_l = times.copy()
        ema_g = g
    else:
        a = tune.decay
        ema_l = a * np.asarray(tune.ema_local_time) + (1 - a) * times
        ema_g = a * float(tune.ema_global_time) + (1 - a) * g

    sizes = np.array(tune.local_batch_size, dtype=np.int64)
    total = int(sizes.sum())
    slow = ema_l > (1 + tune.delta) * ema_g
    fast = ema_l < (1 - tune.delta) * ema_g
    sizes = np.where(slow, sizes - tune.step, sizes)
    sizes = np.where(fast, sizes + tune.step, sizes)
    sizes = np.maximum(sizes, 1)
    # restore the global total: slowest donates / fastest absorbs, ties to lower rank
    load = ema_l / ema_g
    while sizes.sum() > total:
        donors = np.flatnonzero(sizes > 1)
        r = donors[np.argmax(load[donors])]
        sizes[r] -= 1
    while sizes.sum() < total:
        sizes[int(np.argmin(load))] += 1
    return AutoTuneState(
        sizes.tolist(), ema_l.tolist(), ema_g, tune.step, tune.delta, tune.decay, list(tune.baseline)
    )


def _apply_bias(sizes: list[int], bias: list[int]) -> list[int]:
    total = sum(sizes)
    out = np.maximum(np.asarray(sizes) + np.asarray(bias), 1)
    while out.sum() > total:
        r = int(np.argmax(out - np.asarray(sizes)))  # largest excess over the DP size
        if out[r] <= 1:
            r = int(np.argmax(out))
        out[r] -= 1
    while out.sum() < total:
        out[int(np.argmin(out - np.asarray(sizes)))] += 1  # largest deficit
    return out.tolist()


def vbs_partition(metas: Sequence[GlobalSampleMeta], num_ranks: int, alpha: float = 1.0,
                  tune: AutoTuneState | None = None) -> PartitionPlan:
    """Contiguous weighted split of the length-sorted samples; weight = len**alpha."""
    if alpha <= 0:
        raise PartitionError("alpha must be > 0")
    if not metas:
        raise PartitionError("no samples to partition")
    if num_ranks > len(metas):
        raise PartitionError(f"{num_ranks} ranks but only {len(metas)} samples")
    order = sorted_order(metas)
    lens = np.array([metas[g].uih_len for g in order], dtype=np.int64)
    weights = lens ** int(alpha) if float(alpha).is_integer() else lens.astype(np.float64) ** alpha
    sizes, _ = min_max_contiguous_split(weights, num_ranks)
    if tune is not None:
        sizes = _apply_bias(sizes, tune.bias)
    dest, start = [], 0
    for s in sizes:
        dest.append(order[start : start + s])
        start += s
    return _plan_from_order(metas, num_ranks, dest)


# -- custom partitioners ------------------------------------------------------

PartitionFn = Callable[[Sequence[GlobalSampleMeta], int, Any], Any]
_REGISTRY: dict[str, PartitionFn] = {}


def register_partitioner(name: str) -> Callable[[PartitionFn], PartitionFn]:
    def deco(fn: PartitionFn) -> PartitionFn:
        _REGISTRY[name] = fn
        return fn
    return deco


def get_partitioner(name: str) -> PartitionFn:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise PartitionError(f"no custom partitioner named {name!r}; known: {sorted(_REGISTRY)}") from None


def custom(partition_fn: PartitionFn, metas: Sequence[GlobalSampleMeta], num_ranks: int,
           runtime_info: Any = None) -> PartitionPlan:
    """Run a user partitioner and validate what it returns.

    The function may return a :class:`PartitionPlan`, per-rank lists of global
    sample indices, or a flat destination-rank array aligned with ``metas``.
    """
    out = partition_fn(metas, num_ranks, runtime_info)
    if isinstance(out, PartitionPlan):
        plan = out
    elif isinstance(out, np.ndarray) or (len(out) == len(metas) and all(np.isscalar(x) for x in out)):
        dest = [[] for _ in range(num_ranks)]
        for g, d in enumerate(np.asarray(out, dtype=np.int64)):
            if not 0 <= d < num_ranks:
                raise PartitionError(f"invalid partition plan: sample {g} sent to rank {int(d)}")
            dest[int(d)].append(g)
        plan = _plan_from_order(metas, num_ranks, dest)
    else:
        plan = _plan_from_order(metas, num_ranks, [list(map(int, d)) for d in out])
    return validate_plan(plan, metas, num_ranks)


@register_partitioner("round_robin")
def round_robin_partition(metas: Sequence[GlobalSampleMeta], num_ranks: int, runtime_info: Any = None) -> list[list[int]]:
    return [list(range(d, len(metas), num_ranks)) for d in range(num_ranks)]


@register_partitioner("identity")
def _identity(metas, num_ranks, runtime_info=None):
    return identity_partition(metas, num_ranks)


def make_partitioner(name: str, alpha: float = 1.0) -> Callable[..., PartitionPlan]:
    """Resolve a ``partition = fbs | vbs | none | custom:<name>`` config value."""
    if name == "fbs":
        return lambda metas, n, info=None: validate_plan(
            fbs_partition(metas, n), metas, n, fixed_batch=len(metas) // n)
    if name == "vbs":
        return lambda metas, n, info=None: validate_plan(vbs_partition(metas, n, alpha, info), metas, n)
    if name == "none":
        return lambda metas, n, info=None: identity_partition(metas, n)
    if name.startswith("custom:"):
        fn = get_partitioner(name.split(":", 1)[1])
        return lambda metas, n, info=None: custom(fn, metas, n, info)
    raise PartitionError(f"unknown partitioner {name!r}")
