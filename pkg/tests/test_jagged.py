import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqscale.jagged import (JaggedError, JaggedTensor, KeyedJaggedTensor, Layout, indexed_permute,
                             keyed_transpose, ranged_combine, ranged_dispatch)


def jt(segs):
    return JaggedTensor.from_segments(segs)


def naive_permute(segs, perm):
    return [list(segs[j]) for j in perm]


segments = st.lists(st.lists(st.integers(0, 2**63), max_size=50), max_size=60)


class TestJaggedTensor:
    def test_offsets_cached(self):
        t = jt([[1, 2], [], [3]])
        assert t.offsets.tolist() == [0, 2, 2, 3]
        assert t.segment(1).size == 0
        t.check_invariants()

    def test_length_mismatch_rejected(self):
        with pytest.raises(JaggedError, match="does not match"):
            JaggedTensor(np.arange(3), [1, 1])

    def test_negative_length_rejected(self):
        with pytest.raises(JaggedError):
            JaggedTensor(np.arange(2), [3, -1])

    def test_immutable(self):
        t = jt([[1, 2]])
        with pytest.raises(ValueError):
            t.values[0] = 5

    def test_segment_out_of_range(self):
        with pytest.raises(JaggedError, match="out of range"):
            jt([[1]]).segment(1)

    def test_two_dimensional_rows(self):
        t = JaggedTensor(np.arange(12.0).reshape(6, 2), [2, 0, 4])
        assert t.row_shape == (2,)
        assert t.segment(2).shape == (4, 2)


class TestIndexedPermute:
    def test_example(self):
        out = indexed_permute(jt([[1, 2], [3], [4, 5, 6]]), [2, 0, 1])
        assert out.to_list() == naive_permute([[1, 2], [3], [4, 5, 6]], [2, 0, 1])

    def test_identity(self):
        t = jt([[1, 2], [], [3]])
        assert indexed_permute(t, [0, 1, 2]) == t

    def test_repetition(self):
        assert indexed_permute(jt([[7]]), [0, 0]).to_list() == [[7], [7]]

    def test_bad_index_named(self):
        with pytest.raises(JaggedError, match=r"perm\[1\]=5"):
            indexed_permute(jt([[1], [2]]), [0, 5])

    @given(segments, st.data())
    def test_matches_naive(self, segs, data):
        perm = data.draw(st.lists(st.integers(0, max(len(segs) - 1, 0)), max_size=80)) if segs else []
        out = indexed_permute(jt(segs), perm)
        out.check_invariants()
        assert out.to_list() == naive_permute(segs, perm)

    @given(segments, st.randoms())
    def test_inverse_is_identity(self, segs, rnd):
        perm = list(range(len(segs)))
        rnd.shuffle(perm)
        inv = np.argsort(perm)
        t = jt(segs)
        assert indexed_permute(indexed_permute(t, perm), inv) == t


class TestDispatchCombine:
    def test_dispatch_example(self):
        parts = ranged_dispatch(jt([[1], [2, 2], [3]]), [(0, 2), (2, 1)])
        assert [p.to_list() for p in parts] == [[[1], [2, 2]], [[3]]]

    def test_full_range(self):
        t = jt([[1], [2, 2], [3]])
        assert ranged_dispatch(t, [(0, 3)])[0] == t

    def test_empty_range(self):
        t = jt([[1], [2, 2], [3]])
        a, b = ranged_dispatch(t, [(0, 0), (0, 3)])
        assert a.num_segments == 0 and b == t

    def test_overlap_rejected(self):
        with pytest.raises(JaggedError, match="overlap"):
            ranged_dispatch(jt([[1], [2], [3]]), [(0, 2), (1, 2)])

    def test_out_of_bounds_rejected(self):
        with pytest.raises(JaggedError, match="out of bounds"):
            ranged_dispatch(jt([[1], [2]]), [(1, 2)])

    def test_combine_example(self):
        assert ranged_combine([jt([[1], [2, 2]]), jt([[3]])]).to_list() == [[1], [2, 2], [3]]

    def test_combine_neutral_empty(self):
        t = jt([[1], [2, 2]])
        assert ranged_combine([t]) == t
        assert ranged_combine([JaggedTensor.empty(), t, JaggedTensor.empty()]) == t

    def test_combine_incompatible(self):
        with pytest.raises(JaggedError):
            ranged_combine([jt([[1]]), JaggedTensor.from_segments([[1.0]], dtype=np.float64)])

    @given(segments, st.data())
    def test_round_trip(self, segs, data):
        t = jt(segs)
        cuts = sorted(data.draw(st.lists(st.integers(0, len(segs)), max_size=6)))
        bounds = [0] + cuts + [len(segs)]
        ranges = [(a, b - a) for a, b in zip(bounds, bounds[1:])]
        parts = ranged_dispatch(t, ranges)
        for p in parts:
            p.check_invariants()
        assert ranged_combine(parts) == t


def kjt(keys, samples, layout=Layout.FEATURE_MAJOR):
    segs = [[10 * f + s] * (s + 1) for f in range(len(keys)) for s in range(samples)]
    return KeyedJaggedTensor(tuple(keys), jt(segs), layout, samples)


class TestKeyedTranspose:
    def test_example(self):
        # feature-major [A0, A1, B0, B1] -> batch-major [A0, B0, A1, B1]
        t = KeyedJaggedTensor(("A", "B"), jt([[0], [1, 1], [2], [3, 3, 3]]), Layout.FEATURE_MAJOR, 2)
        out = keyed_transpose(t)
        assert out.layout is Layout.BATCH_MAJOR
        assert out.inner.to_list() == [[0], [2], [1, 1], [3, 3, 3]]

    def test_single_key(self):
        t = kjt(["A"], 3)
        out = keyed_transpose(t)
        assert out.layout is Layout.BATCH_MAJOR and out.inner == t.inner

    def test_involution(self):
        t = kjt(["A", "B", "C"], 4)
        assert keyed_transpose(keyed_transpose(t)) == t

    def test_bad_count(self):
        with pytest.raises(JaggedError):
            KeyedJaggedTensor(("A", "B"), jt([[1], [2], [3]]), Layout.FEATURE_MAJOR, 2)

    @given(st.integers(1, 6), st.integers(0, 8))
    def test_segment_identity(self, n_f, n_s):
        t = kjt([f"k{i}" for i in range(n_f)], n_s)
        out = keyed_transpose(t)
        for f in range(n_f):
            for s in range(n_s):
                # index arithmetic oracle: (f, s) -> s * F + f
                assert np.array_equal(out.inner.segment(s * n_f + f), t.segment(f, s))
                assert np.array_equal(out.segment(f, s), t.segment(f, s))
        assert keyed_transpose(out) == t
