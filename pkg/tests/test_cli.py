import hashlib
import json

import pytest

from seqscale.cli import ExperimentConfig, load_config, main
from seqscale.sim import read_csv
from seqscale.workload import ConfigError, load

SMALL = ["--ranks", "2", "--batch", "4", "--max-uih", "64", "--iterations", "3", "--table-rows", "4096",
         "--distribution", "lognormal:3,0.8"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestGen:
    def test_deterministic(self, tmp_path):
        args = ["gen", "--ranks", "4", "--batch", "32", "--max-uih", "2048", "--seed", "7", "--iterations", "3"]
        assert main(args + ["--out", str(tmp_path / "a.bin")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.bin")]) == 0
        assert sha(tmp_path / "a.bin") == sha(tmp_path / "b.bin")

    def test_full_collision(self, tmp_path):
        import numpy as np
        assert main(["gen", *SMALL, "--collision", "1.0", "--out", str(tmp_path / "w.bin")]) == 0
        wl = load(tmp_path / "w.bin")
        sets = [np.unique(np.concatenate([s.uih for b in it for s in b.samples])) for it in wl.iterations]
        assert all(np.array_equal(a, b) for a, b in zip(sets, sets[1:]))

    def test_bad_distribution(self, tmp_path, capsys):
        assert main(["gen", "--distribution", "zipf:2", "--out", str(tmp_path / "w.bin")]) == 1
        assert "unknown length distribution" in capsys.readouterr().err

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as e:
            main(["gen", "--frobnicate"])
        assert e.value.code == 1

    def test_seed_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FREESCALE_SEED", "11")
        main(["gen", *SMALL, "--out", str(tmp_path / "env.bin")])
        monkeypatch.delenv("FREESCALE_SEED")
        main(["gen", *SMALL, "--seed", "11", "--out", str(tmp_path / "flag.bin")])
        assert sha(tmp_path / "env.bin") == sha(tmp_path / "flag.bin")


class TestConfig:
    def test_ini_and_override(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[workload]\nranks = 3\nmax_uih = 99\n[balancer]\nenabled = yes\npartition = vbs\n"
                     "[sweep]\nbatch_size = 2, 4\n")
        cfg = load_config(p, {("workload", "ranks"): 5})
        assert cfg.workload.num_ranks == 5 and cfg.workload.max_uih == 99
        assert cfg.balancer and cfg.partition == "vbs"
        assert cfg.runs() == [{"batch_size": 2}, {"batch_size": 4}]

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[workload]\nrankz = 3\n")
        with pytest.raises(ConfigError, match="rankz"):
            load_config(p)

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[model]\nx = 1\n")
        with pytest.raises(ConfigError, match="section"):
            load_config(p)

    def test_empty_sweep(self):
        assert ExperimentConfig().runs() == [{}]

    def test_max_runs(self):
        cfg = ExperimentConfig(sweep={"max_uih": [1, 2, 3], "batch_size": [1, 2]}, max_runs=5)
        with pytest.raises(ConfigError, match="max_runs"):
            cfg.runs()

    def test_bad_partition(self):
        with pytest.raises(ConfigError):
            load_config(None, {("balancer", "partition"): "custom:missing"})


class TestRun:
    def test_outputs(self, tmp_path):
        out = tmp_path / "o"
        assert main(["run", *SMALL, "--out", str(out), "--gnuplot", "--balancer"]) == 0
        recs = read_csv(out / "run000_synchronized.csv")
        assert [r.iteration for r in recs] == [0, 1, 2]
        lines = (out / "run000_synchronized.jsonl").read_text().splitlines()
        header = json.loads(lines[0])["config"]
        assert header["workload"]["num_ranks"] == 2 and header["balancer"] is True
        assert json.loads(lines[1])["iteration_us"] == recs[0].iteration_us
        assert (out / "run000_synchronized.dat").exists()
        assert (out / "run000_synchronized.ckpt").stat().st_size > 24

    def test_reproducible(self, tmp_path):
        names = ("run000_prioritized.csv", "run000_prioritized.jsonl", "run000_prioritized.ckpt")
        digests = []
        for _ in range(2):
            main(["run", *SMALL, "--out", str(tmp_path), "--mode", "prioritized"])
            digests.append([sha(tmp_path / n) for n in names])
        assert digests[0] == digests[1]

    def test_sweep(self, tmp_path):
        assert main(["run", *SMALL, "--out", str(tmp_path), "--sweep-batch", "2,4"]) == 0
        assert read_csv(tmp_path / "run001_synchronized.csv")[0].batch_size == 4

    def test_check_parity(self, tmp_path, capsys):
        assert main(["run", *SMALL, "--out", str(tmp_path), "--mode", "prioritized", "--check-parity"]) == 0
        assert "identical" in capsys.readouterr().out
        assert (tmp_path / "run000_synchronized.ckpt").read_bytes() == (tmp_path / "run000_prioritized.ckpt").read_bytes()

    def test_parity_mismatch_exit(self, tmp_path, monkeypatch):
        import seqscale.cli as cli
        real = cli._run_one

        def skewed(cfg, spec, mode):
            wl, res = real(cfg, spec, mode)
            if mode == "prioritized":
                res.W = res.W + 1e-300
                res.W[0, 0] += 1.0
            return wl, res

        monkeypatch.setattr(cli, "_run_one", skewed)
        assert main(["run", *SMALL, "--out", str(tmp_path), "--check-parity"]) == 3

    def test_from_workload_file(self, tmp_path):
        main(["gen", *SMALL, "--out", str(tmp_path / "w.bin")])
        assert main(["run", "--workload", str(tmp_path / "w.bin"), *SMALL, "--out", str(tmp_path / "o")]) == 0

    def test_missing_workload_file(self, tmp_path):
        assert main(["run", *SMALL, "--workload", str(tmp_path / "nope.bin"), "--out", str(tmp_path)]) == 2


class TestParityCommand:
    def test_small(self, capsys):
        rc = main(["parity", "--ranks", "1,2", "--collisions", "0,1", "--iterations", "5"])
        assert rc == 0
        assert "4/4 configurations bitwise identical" in capsys.readouterr().out


class TestBench:
    def parse(self, text):
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        return {int(s): (float(a), float(b)) for s, a, b in rows}

    def test_zero_size_latency(self, capsys):
        assert main(["bench", "--sizes", "0", "--ranks", "4"]) == 0
        assert self.parse(capsys.readouterr().out)[0] == (15.0, 15.0)

    def test_bandwidth_doubling(self, capsys):
        main(["bench", "--sizes", "1000000,2000000", "--ranks", "4"])
        t = self.parse(capsys.readouterr().out)
        tx1 = t[1000000][0] - 15.0
        tx2 = t[2000000][0] - 15.0
        assert tx2 == pytest.approx(2 * tx1)
        assert t[1000000][1] > t[1000000][0]

    @pytest.mark.parametrize("coll", ["all_to_all", "all_reduce"])
    def test_other_collectives(self, coll, capsys, tmp_path):
        assert main(["bench", "--collective", coll, "--sizes", "0,1024", "--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "b.csv").read_text() == capsys.readouterr().out

    def test_too_many_ranks(self):
        assert main(["bench", "--ranks", "9", "--max-workers", "8"]) == 1
