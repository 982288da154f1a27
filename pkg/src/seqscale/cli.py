"""Command-line entry point: ``seqscale {gen,run,bench,parity}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
3 parity failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import itertools
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .collectives import CollectiveError, LinkParams, Mode, World
from .partition import PartitionError, make_partitioner
from .pipeline import PipelineConfig, PipelineError, run
from .sim import CostModel, write_csv, write_gnuplot, write_jsonl
from .workload import ConfigError, WorkloadFormatError, WorkloadSpec, generate, load, parse_distribution, save

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PARITY = 0, 1, 2, 3
SEED_ENV = "FREESCALE_SEED"


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------------

# section -> key -> parser
_SCHEMA: dict[str, dict[str, Any]] = {
    "workload": {
        "path": str, "ranks": int, "batch_size": int, "max_uih": int, "distribution": str,
        "table_rows": int, "collision": float, "iterations": int, "seed": int, "unique_fraction": float,
    },
    "run": {
        "mode": str, "collective_mode": str, "dim": int, "emb_lr": float, "dense_lr": float,
        "model_seed": int, "output": str, "max_runs": int,
    },
    "balancer": {"enabled": "bool", "prefetch_depth": int, "partition": str, "alpha": float},
    "sim": {
        "c0": float, "c1": float, "c2": float, "optimizer_us": float, "metrics_us": float,
        "latency_us": float, "bandwidth_gbps": float, "copy_cost_us_per_mb": float, "overlap_penalty": float,
    },
    "sweep": {"max_uih": "ints", "batch_size": "ints", "rank_count": "ints", "collision_ratio": "floats"},
}


@dataclass
class ExperimentConfig:
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    workload_path: str | None = None
    mode: str = "synchronized"
    collective_mode: str = "sm_free"
    balancer: bool = False
    prefetch_depth: int = 1
    partition: str = "fbs"
    alpha: float = 1.0
    dim: int = 8
    emb_lr: float = 0.05
    dense_lr: float = 0.05
    model_seed: int = 0
    sim: dict[str, float] = field(default_factory=dict)
    sweep: dict[str, list] = field(default_factory=dict)
    output: str = "out"
    max_runs: int = 64

    def cost_model(self) -> CostModel:
        link_keys = {"latency_us", "bandwidth_gbps", "copy_cost_us_per_mb", "overlap_penalty"}
        link = LinkParams(**{k: v for k, v in self.sim.items() if k in link_keys})
        other = {k: v for k, v in self.sim.items() if k not in link_keys}
        try:
            mode = Mode(self.collective_mode)
        except ValueError:
            raise ConfigError(f"collective_mode must be fused or sm_free, got {self.collective_mode!r}") from None
        return CostModel(link=link, mode=mode, **other)

    def pipeline_config(self, mode: str | None = None) -> PipelineConfig:
        return PipelineConfig(
            mode=mode or self.mode, balancer=self.balancer, partition=self.partition, alpha=self.alpha,
            prefetch_depth=self.prefetch_depth, dim=self.dim, emb_lr=self.emb_lr, dense_lr=self.dense_lr,
            model_seed=self.model_seed, cost=self.cost_model())

    def runs(self) -> list[dict[str, Any]]:
        """Sweep points as overrides of the base workload spec."""
        axes = {"max_uih": "max_uih", "batch_size": "batch_size", "rank_count": "num_ranks",
                "collision_ratio": "target_collision_ratio"}
        active = [(axes[k], v) for k, v in self.sweep.items() if v]
        if not active:
            return [{}]
        n = int(np.prod([len(v) for _, v in active]))
        if n > self.max_runs:
            raise ConfigError(f"sweep has {n} runs, more than max_runs={self.max_runs}")
        return [dict(zip([k for k, _ in active], combo)) for combo in itertools.product(*[v for _, v in active])]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["workload"] = self.workload.to_dict()
        return d


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _parse_list(v: str, kind) -> list:
    return [kind(x) for x in v.replace(",", " ").split()]


def _convert(section: str, key: str, raw: str):
    kind = _SCHEMA[section][key]
    try:
        if kind == "bool":
            return _parse_bool(raw)
        if kind == "ints":
            return _parse_list(raw, int)
        if kind == "floats":
            return _parse_list(raw, float)
        return kind(raw)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from None


def load_config(path: str | Path | None, overrides: dict[tuple[str, str], Any] | None = None) -> ExperimentConfig:
    """Read an INI-style config, then apply ``{(section, key): value}`` overrides."""
    values: dict[tuple[str, str], Any] = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as f:
                cp.read_file(f)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        for section in cp.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]; expected one of {sorted(_SCHEMA)}")
            for key, raw in cp.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of {sorted(_SCHEMA[section])}")
                values[(section, key)] = _convert(section, key, raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return _build(values)


def _build(v: dict[tuple[str, str], Any]) -> ExperimentConfig:
    base = WorkloadSpec()
    seed = v.get(("workload", "seed"))
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    dist = v.get(("workload", "distribution"))
    spec = WorkloadSpec(
        num_ranks=v.get(("workload", "ranks"), base.num_ranks),
        batch_size=v.get(("workload", "batch_size"), base.batch_size),
        max_uih=v.get(("workload", "max_uih"), base.max_uih),
        length_distribution=parse_distribution(dist) if dist else base.length_distribution,
        table_rows=v.get(("workload", "table_rows"), base.table_rows),
        target_collision_ratio=v.get(("workload", "collision"), base.target_collision_ratio),
        seed=seed if seed is not None else base.seed,
        num_iterations=v.get(("workload", "iterations"), base.num_iterations),
        unique_fraction=v.get(("workload", "unique_fraction"), base.unique_fraction),
    )
    spec.validate()
    cfg = ExperimentConfig(
        workload=spec,
        workload_path=v.get(("workload", "path")),
        mode=v.get(("run", "mode"), "synchronized"),
        collective_mode=v.get(("run", "collective_mode"), "sm_free"),
        balancer=v.get(("balancer", "enabled"), False),
        prefetch_depth=v.get(("balancer", "prefetch_depth"), 1),
        partition=v.get(("balancer", "partition"), "fbs"),
        alpha=v.get(("balancer", "alpha"), 1.0),
        dim=v.get(("run", "dim"), 8),
        emb_lr=v.get(("run", "emb_lr"), 0.05),
        dense_lr=v.get(("run", "dense_lr"), 0.05),
        model_seed=v.get(("run", "model_seed"), 0),
        sim={k: val for (s, k), val in v.items() if s == "sim"},
        sweep={k: val for (s, k), val in v.items() if s == "sweep"},
        output=v.get(("run", "output"), "out"),
        max_runs=v.get(("run", "max_runs"), 64),
    )
    if cfg.mode not in ("synchronized", "prioritized"):
        raise ConfigError(f"mode must be synchronized or prioritized, got {cfg.mode!r}")
    cfg.cost_model()
    try:
        make_partitioner(cfg.partition, cfg.alpha)
    except PartitionError as e:
        raise ConfigError(str(e)) from None
    return cfg


# -- commands ---------------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _workload_overrides(args))
    wl = generate(cfg.workload)
    save(wl, args.out)
    digest = hashlib.sha256(Path(args.out).read_bytes()).hexdigest()
    print(f"wrote {args.out} ({len(wl)} iterations, sha256 {digest[:16]})")
    return EXIT_OK


def _run_one(cfg: ExperimentConfig, spec: WorkloadSpec, mode: str):
    wl = load(cfg.workload_path) if cfg.workload_path else generate(spec)
    return wl, run(wl, cfg.pipeline_config(mode))


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, {**_workload_overrides(args), **_run_overrides(args)})
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    failed = False
    for k, point in enumerate(cfg.runs()):
        spec = dataclasses.replace(cfg.workload, **point)
        modes = ["synchronized", "prioritized"] if args.check_parity else [cfg.mode]
        checkpoints = {}
        for mode in modes:
            _, res = _run_one(cfg, spec, mode)
            stem = out / f"run{k:03d}_{mode}"
            header = {**cfg.to_dict(), "mode": mode, "workload": spec.to_dict(), "sweep_point": point}
            write_csv(res.records, f"{stem}.csv")
            write_jsonl(res.records, f"{stem}.jsonl", header=header)
            if args.gnuplot:
                write_gnuplot(res.records, f"{stem}.dat")
            Path(f"{stem}.ckpt").write_bytes(res.checkpoint())
            checkpoints[mode] = res.checkpoint()
            print(f"wrote {stem}.csv {stem}.jsonl {stem}.ckpt")
        if args.check_parity:
            same = checkpoints["synchronized"] == checkpoints["prioritized"]
            print(f"run{k:03d} parity: {'identical' if same else 'MISMATCH'}")
            failed |= not same
    return EXIT_PARITY if failed else EXIT_OK


def cmd_parity(args: argparse.Namespace) -> int:
    failed = 0
    total = 0
    for p in args.ranks:
        for r in args.collisions:
            spec = WorkloadSpec(num_ranks=p, batch_size=args.batch, max_uih=args.max_uih,
                                length_distribution=parse_distribution(args.distribution),
                                table_rows=args.table_rows, target_collision_ratio=r,
                                seed=_seed(args.seed), num_iterations=args.iterations)
            wl = generate(spec)
            cks = [run(wl, PipelineConfig(mode=m, dim=args.dim, balancer=args.balancer)).checkpoint()
                   for m in ("synchronized", "prioritized")]
            ok = cks[0] == cks[1]
            total += 1
            failed += not ok
            print(f"ranks={p} collision={r}: {'identical' if ok else 'MISMATCH'}")
    print(f"{total - failed}/{total} configurations bitwise identical")
    return EXIT_PARITY if failed else EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    p = args.ranks
    if p > args.max_workers:
        raise UsageError(f"--ranks {p} exceeds --max-workers {args.max_workers}")
    rng = np.random.default_rng(_seed(args.seed))
    rows = []
    for size in args.sizes:
        chunks = [rng.integers(0, 256, size=size, dtype=np.uint8).tobytes() for _ in range(p)]
        lat = {}
        for mode in (Mode.FUSED, Mode.SM_FREE):
            w = World(p, LinkParams(), mode)
            if args.collective == "ring_all_gather":
                got = w.ring_all_gather(chunks) if p > 1 else [[chunks[0]]]
                if got != w.all_gather(chunks):
                    raise CollectiveError("ring all-gather disagrees with the reference gather")
                w.ring_all_gather(chunks)
            elif args.collective == "all_to_all":
                send = [[rng.integers(0, 256, size=size, dtype=np.uint8).tobytes() for _ in range(p)] for _ in range(p)]
                got = w.all_to_all_bytes(send)
                if got != [[send[s][r] for s in range(p)] for r in range(p)]:
                    raise CollectiveError("all-to-all output is not the transpose of its input")
            else:
                w.last_us = w.all_reduce_time(size)
            lat[mode.value] = w.last_us
        rows.append((size, lat["fused"], lat["sm_free"]))
    lines = ["size_bytes,fused_us,sm_free_us"] + [f"{s},{a!r},{b!r}" for s, a, b in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems exit with 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _workload_overrides(a: argparse.Namespace) -> dict:
    return {("workload", "ranks"): a.ranks, ("workload", "batch_size"): a.batch,
            ("workload", "max_uih"): a.max_uih, ("workload", "seed"): a.seed,
            ("workload", "collision"): a.collision, ("workload", "distribution"): a.distribution,
            ("workload", "iterations"): a.iterations, ("workload", "table_rows"): a.table_rows}


def _run_overrides(a: argparse.Namespace) -> dict:
    return {("workload", "path"): a.workload, ("run", "mode"): a.mode,
            ("run", "collective_mode"): a.collective_mode, ("run", "output"): a.out, ("run", "dim"): a.dim,
            ("balancer", "enabled"): a.balancer, ("balancer", "partition"): a.partition,
            ("sweep", "max_uih"): a.sweep_max_uih, ("sweep", "batch_size"): a.sweep_batch,
            ("sweep", "rank_count"): a.sweep_ranks, ("sweep", "collision_ratio"): a.sweep_collision,
            ("run", "max_runs"): a.max_runs}


def _add_workload_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="INI config file; flags override it")
    sp.add_argument("--ranks", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--max-uih", type=int)
    sp.add_argument("--seed", type=int, help=f"defaults to ${SEED_ENV}, then 0")
    sp.add_argument("--collision", type=float, help="target consecutive-iteration collision ratio")
    sp.add_argument("--distribution", help="lognormal:MU,SIGMA | uniform:LO,HI | empirical:LEN=W,...")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--table-rows", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="seqscale", description="Sequence-model training simulator")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a workload file")
    _add_workload_flags(g)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("run", help="run experiments and write metric tables")
    _add_workload_flags(r)
    r.add_argument("--workload", help="workload file from `gen` (instead of generating)")
    r.add_argument("--mode", choices=["synchronized", "prioritized"])
    r.add_argument("--collective-mode", choices=["fused", "sm_free"])
    r.add_argument("--balancer", action=argparse.BooleanOptionalAction, default=None)
    r.add_argument("--partition", help="fbs | vbs | none | custom:<name>")
    r.add_argument("--dim", type=int)
    r.add_argument("--out", help="output directory")
    r.add_argument("--sweep-max-uih", type=_ints)
    r.add_argument("--sweep-batch", type=_ints)
    r.add_argument("--sweep-ranks", type=_ints)
    r.add_argument("--sweep-collision", type=_floats)
    r.add_argument("--max-runs", type=int)
    r.add_argument("--check-parity", action="store_true", help="run both modes and compare checkpoints")
    r.add_argument("--gnuplot", action="store_true", help="also write whitespace-separated .dat files")
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bench", help="logical latency of a collective, fused vs sm_free")
    b.add_argument("--collective", choices=["ring_all_gather", "all_to_all", "all_reduce"], default="ring_all_gather")
    b.add_argument("--sizes", type=_ints, default=[0, 1 << 10, 1 << 16, 1 << 20])
    b.add_argument("--ranks", type=int, default=4)
    b.add_argument("--max-workers", type=int, default=64)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench)

    q = sub.add_parser("parity", help="prioritized vs synchronized bitwise comparison")
    q.add_argument("--ranks", type=_ints, default=[1, 2, 4, 8])
    q.add_argument("--collisions", type=_floats, default=[0.0, 0.05, 0.25, 1.0])
    q.add_argument("--iterations", type=int, default=100)
    q.add_argument("--batch", type=int, default=4)
    q.add_argument("--max-uih", type=int, default=128)
    q.add_argument("--distribution", default="lognormal:3,0.8")
    q.add_argument("--table-rows", type=int, default=1024)
    q.add_argument("--dim", type=int, default=8)
    q.add_argument("--balancer", action=argparse.BooleanOptionalAction, default=True)
    q.add_argument("--seed", type=int)
    q.set_defaults(fn=cmd_parity)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"seqscale {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PipelineError, CollectiveError, WorkloadFormatError, OSError, ValueError, RuntimeError) as e:
        print(f"seqscale {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
