"""Cross-module invariants as property functions, each counting the cases it checks.

``run_suite`` wraps every property in hypothesis with its own example budget
and returns the per-property case counts.
"""

from collections import Counter

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from seqscale.balancer import stage3_shuffle
from seqscale.collectives import World
from seqscale.embedding import IndexSet, compute_collision
from seqscale.jagged import (JaggedTensor, KeyedJaggedTensor, Layout, indexed_permute, keyed_transpose,
                             ranged_combine, ranged_dispatch)
from seqscale.partition import custom, make_partitioner, metas_from_lengths, validate_plan
from seqscale.pipeline import HOOK_POINTS, Pipeline, PipelineConfig
from seqscale.sim import Timeline
from seqscale.workload import Batch, LogNormal, Sample, Workload, WorkloadSpec, dumps, generate, loads

COUNTS: Counter = Counter()

segs = st.lists(st.lists(st.integers(0, 2**64 - 1), max_size=12), max_size=20)


def prop_permute_round_trip(segments, rnd):
    t = JaggedTensor.from_segments(segments)
    perm = list(range(len(segments)))
    rnd.shuffle(perm)
    out = indexed_permute(t, perm)
    out.check_invariants()
    assert indexed_permute(out, np.argsort(perm)) == t
    COUNTS["jagged_permute"] += 1


def prop_dispatch_combine(segments, cuts):
    t = JaggedTensor.from_segments(segments)
    bounds = [0] + sorted(min(c, len(segments)) for c in cuts) + [len(segments)]
    parts = ranged_dispatch(t, [(a, b - a) for a, b in zip(bounds, bounds[1:])])
    assert ranged_combine(parts) == t
    COUNTS["jagged_dispatch"] += 1


def prop_transpose_involution(n_f, lens):
    n_s = len(lens) // n_f
    lens = lens[: n_s * n_f]
    t = KeyedJaggedTensor(tuple(f"k{i}" for i in range(n_f)),
                          JaggedTensor.from_segments([[k] * n for k, n in enumerate(lens)]), Layout.FEATURE_MAJOR, n_s)
    back = keyed_transpose(keyed_transpose(t))
    assert back == t
    COUNTS["jagged_transpose"] += 1


def prop_id_disjoint_union(cur, nxt):
    co, ex_cur, ex_next = compute_collision(IndexSet.shard_major(cur), IndexSet.shard_major(nxt))
    u_next = np.unique(np.asarray(nxt, dtype=np.uint64))
    assert np.intersect1d(co, ex_next).size == 0
    assert np.array_equal(np.union1d(co, ex_next), u_next)
    assert np.intersect1d(co, ex_cur).size == 0
    COUNTS["id_disjoint_union"] += 1


def prop_sample_conservation(lens, data):
    p = len(lens)
    batches = [Batch([Sample(np.arange(n) + 1000 * r + 100 * k, [np.array([k, r])], float(r * 10 + k))
                      for k, n in enumerate(row)], r) for r, row in enumerate(lens)]
    metas = metas_from_lengths(np.array(lens))
    assignment = data.draw(st.lists(st.integers(0, p - 1), min_size=len(metas), max_size=len(metas)))
    plan = custom(lambda m, n, r: np.array(assignment), metas, p)
    out, _ = stage3_shuffle(World(p), batches, plan)
    before = Counter(s.key() for b in batches for s in b.samples)
    after = Counter(s.key() for b in out for s in b.samples)
    assert before == after
    COUNTS["sample_conservation"] += 1


def prop_partition_conservation(lens, p, name):
    lens = lens[: len(lens) // p * p] or [0] * p
    metas = metas_from_lengths(np.array(lens).reshape(p, -1))
    plan = make_partitioner(name)(metas, p)
    validate_plan(plan, metas, p)
    COUNTS["partition_conservation"] += 1


def prop_timeline_causality(ops):
    tl = Timeline(3, penalty=1.1)
    prev = []
    for kind, rank, dur, chan in ops:
        if kind == 0:
            prev = [tl.compute(rank, "c", dur, after=prev[-1:], channel=chan)]
        elif kind == 1:
            prev = tl.collective("x", dur, chan, after=prev[-1:])
        else:
            tl.blocking("b", dur, "ids")
    tl.check_causality()
    COUNTS["timeline_causality"] += 1


def prop_codec_round_trip(seed, r):
    spec = WorkloadSpec(num_ranks=2, batch_size=2, max_uih=20, length_distribution=LogNormal(2.0, 1.0),
                        table_rows=4096, num_iterations=2, seed=seed, target_collision_ratio=r)
    wl = generate(spec)
    back = loads(dumps(wl))
    assert back == wl
    COUNTS["codec_round_trip"] += 1


def prop_hook_discipline(seed, mode):
    spec = WorkloadSpec(num_ranks=2, batch_size=2, max_uih=16, length_distribution=LogNormal(1.5, 0.5),
                        table_rows=512, num_iterations=3, seed=seed, target_collision_ratio=0.3)
    pl = Pipeline(generate(spec), PipelineConfig(mode=mode, balancer=True, dim=2))
    seen = []
    for p in HOOK_POINTS:
        pl.hooks.register(p, lambda ev, p=p: seen.append((ev.iteration, p)))
    pl.run()
    assert seen == [(i, p) for i in range(3) for p in HOOK_POINTS]
    assert all(v == 3 for v in pl.hooks.counts.values())
    COUNTS["hook_discipline"] += 1


def _budgeted(n):
    return settings(max_examples=n, deadline=None, database=None, derandomize=True,
                    suppress_health_check=list(HealthCheck))


def run_suite(scale=1.0):
    """Run every property; returns per-property case counts."""
    COUNTS.clear()
    b = lambda n: max(1, int(n * scale))  # noqa: E731
    ids = st.lists(st.integers(0, 200), max_size=40)
    chan = st.sampled_from(["main", "side", "aux"])
    suite = [
        (prop_permute_round_trip, 2000, (segs, st.randoms(use_true_random=False))),
        (prop_dispatch_combine, 2000, (segs, st.lists(st.integers(0, 20), max_size=5))),
        (prop_transpose_involution, 1500, (st.integers(1, 4), st.lists(st.integers(0, 5), max_size=24))),
        (prop_id_disjoint_union, 2000, (ids, ids)),
        (prop_sample_conservation, 800,
         (st.integers(1, 4).flatmap(lambda p: st.lists(st.lists(st.integers(0, 6), min_size=2, max_size=2),
                                                        min_size=p, max_size=p)), st.data())),
        (prop_partition_conservation, 1000,
         (st.lists(st.integers(0, 300), min_size=1, max_size=32), st.sampled_from([1, 2, 4]),
          st.sampled_from(["fbs", "vbs", "none", "custom:round_robin"]))),
        (prop_timeline_causality, 1000,
         (st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.floats(0, 50), chan), max_size=25),)),
        (prop_codec_round_trip, 300, (st.integers(0, 2**31), st.sampled_from([None, 0.0, 0.5, 1.0]))),
        (prop_hook_discipline, 40, (st.integers(0, 2**31), st.sampled_from(["synchronized", "prioritized"]))),
    ]
    for fn, n, strategies in suite:
        _budgeted(b(n))(given(*strategies)(fn))()
    return dict(COUNTS)
