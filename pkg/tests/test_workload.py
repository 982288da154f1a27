import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqscale.workload import (ConfigError, Empirical, LogNormal, Uniform, Workload, WorkloadFormatError,
                               WorkloadSpec, draw_shape, dumps, generate, load, loads, measure_sparsity,
                               parse_distribution, save)


def small(**kw):
    base = dict(num_ranks=2, batch_size=4, max_uih=200, length_distribution=LogNormal(3.0, 0.7),
                table_rows=4096, num_iterations=3, seed=11)
    base.update(kw)
    return WorkloadSpec(**base)


def unique_sets(wl):
    return [np.unique(np.concatenate([s.uih for b in it for s in b.samples])) for it in wl.iterations]


class TestDistributions:
    def test_parse(self):
        assert parse_distribution("lognormal:7,1.2") == LogNormal(7.0, 1.2)
        assert parse_distribution("uniform:5,5") == Uniform(5, 5)
        assert isinstance(parse_distribution("empirical:1=0.5,10=0.5"), Empirical)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            parse_distribution("zipf:1")

    def test_uniform_inclusive(self):
        x = Uniform(2, 3).draw(np.random.default_rng(0), 1000)
        assert set(np.unique(x)) == {2, 3}


class TestGenerate:
    def test_degenerate_lengths(self):
        wl = generate(small(length_distribution=Uniform(5, 5), batch_size=2))
        assert all(len(s.uih) == 5 for it in wl for b in it for s in b.samples)

    def test_full_collision(self):
        sets = unique_sets(generate(small(target_collision_ratio=1.0, num_iterations=4)))
        assert all(np.array_equal(a, b) for a, b in zip(sets, sets[1:]))

    def test_zero_collision(self):
        sets = unique_sets(generate(small(target_collision_ratio=0.0, table_rows=1 << 20)))
        assert all(np.intersect1d(a, b).size == 0 for a, b in zip(sets, sets[1:]))

    @pytest.mark.parametrize("r", [0.0, 0.25, 0.5, 1.0])
    def test_collision_control(self, r):
        sets = unique_sets(generate(small(target_collision_ratio=r, num_iterations=21, table_rows=1 << 16)))
        measured = np.mean([np.intersect1d(a, b).size / b.size for a, b in zip(sets, sets[1:])])
        assert abs(measured - r) <= 0.02

    def test_table_too_small(self):
        with pytest.raises(ConfigError, match="table_rows"):
            generate(small(table_rows=16, target_collision_ratio=0.0))

    def test_truncation(self):
        wl = generate(small(max_uih=30, length_distribution=LogNormal(5.0, 1.0)))
        lens = [len(s.uih) for it in wl for b in it for s in b.samples]
        assert max(lens) <= 30

    def test_deterministic(self):
        assert generate(small()) == generate(small())
        assert generate(small()) != generate(small(seed=12))

    def test_candidates_valid(self):
        for it in generate(small()):
            for b in it:
                for s in b.samples:
                    assert 1 <= s.num_candidates <= 8
                    assert all(1 <= n <= 4 for n in s.candidate_lens)

    def test_shape_matches_generate(self):
        spec = small()
        shape = draw_shape(spec)
        wl = generate(spec)
        got = np.array([[b.uih_lens for b in it] for it in wl.iterations])
        assert np.array_equal(got, shape.uih_lens)


class TestSparsity:
    def test_uniform(self):
        assert measure_sparsity(np.array([4, 4, 4])) == 0.0

    def test_hand_values(self):
        assert measure_sparsity(np.array([2, 4])) == pytest.approx(0.25)
        assert measure_sparsity(np.array([1, 1, 1, 21000])) == pytest.approx(1 - 21003 / 84000)

    def test_all_zero_is_error(self):
        with pytest.raises(ValueError):
            measure_sparsity(np.array([0, 0]))

    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=40).filter(any))
    def test_range(self, lens):
        s = measure_sparsity(np.array(lens))
        assert 0.0 <= s < 1.0


class TestCodec:
    def test_round_trip(self, tmp_path):
        wl = generate(small())
        save(wl, tmp_path / "w.bin")
        back = load(tmp_path / "w.bin")
        assert back == wl
        assert dumps(back) == dumps(wl)

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.bin").write_bytes(b"")
        assert len(load(tmp_path / "e.bin")) == 0

    def test_truncated(self):
        buf = dumps(generate(small()))
        with pytest.raises(WorkloadFormatError, match="last complete record"):
            loads(buf[:-7])

    def test_bad_magic(self):
        with pytest.raises(WorkloadFormatError):
            loads(b"NOTMAGIC" + b"\0" * 16)
