"""Synthetic sequence-recommendation workloads and their on-disk format.

Lengths (UIH, candidate counts, candidate lengths) and labels come from one RNG
stream and row IDs from another, so experiments that only need lengths see the
exact same lengths as full generations with the same seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .jagged import ID_DTYPE, JaggedTensor


class ConfigError(ValueError):
    """Workload spec cannot be honoured (bad parameters, table too small)."""


class WorkloadFormatError(ValueError):
    """Workload file is malformed or truncated."""


# -- length distributions ---------------------------------------------------


@dataclass(frozen=True)
class LogNormal:
    mu: float = 7.0
    sigma: float = 1.2

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        return np.floor(rng.lognormal(self.mu, self.sigma, size)).astype(np.int64)


@dataclass(frozen=True)
class Uniform:
    lo: int
    hi: int

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.lo > self.hi or self.lo < 0:
            raise ConfigError(f"bad Uniform({self.lo}, {self.hi})")
        return rng.integers(self.lo, self.hi, size=size, endpoint=True, dtype=np.int64)


@dataclass(frozen=True)
class Empirical:
    """Discrete histogram: ``lengths[k]`` drawn with probability ``weights[k] / sum``."""

    lengths: tuple[int, ...]
    weights: tuple[float, ...]

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        if len(self.lengths) != len(w) or not len(w) or w.min() < 0 or w.sum() <= 0:
            raise ConfigError("Empirical histogram needs matching, non-negative weights")
        return rng.choice(np.asarray(self.lengths, dtype=np.int64), size=size, p=w / w.sum())


Distribution = Union[LogNormal, Uniform, Empirical]
_DISTRIBUTIONS = {"lognormal": LogNormal, "uniform": Uniform, "empirical": Empirical}


def distribution_to_dict(d: Distribution) -> dict:
    name = {LogNormal: "lognormal", Uniform: "uniform", Empirical: "empirical"}[type(d)]
    return {"kind": name, **{k: list(v) if isinstance(v, tuple) else v for k, v in asdict(d).items()}}


def distribution_from_dict(d: dict) -> Distribution:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _DISTRIBUTIONS:
        raise ConfigError(f"unknown length distribution {kind!r}; expected one of {sorted(_DISTRIBUTIONS)}")
    if kind == "empirical":
        return Empirical(tuple(int(x) for x in d["lengths"]), tuple(float(x) for x in d["weights"]))
    return _DISTRIBUTIONS[kind](**d)


def parse_distribution(text: str) -> Distribution:
    """Parse ``lognormal:7.0,1.2`` / ``uniform:5,5`` style CLI strings."""
    name, _, args = text.partition(":")
    name = name.strip().lower()
    nums = [a for a in args.split(",") if a.strip()]
    if name == "lognormal":
        return LogNormal(*(float(a) for a in nums))
    if name == "uniform":
        if len(nums) != 2:
            raise ConfigError("uniform needs lo,hi")
        return Uniform(int(nums[0]), int(nums[1]))
    if name == "empirical":
        pairs = [p.split("=") for p in nums]
        return Empirical(tuple(int(a) for a, _ in pairs), tuple(float(b) for _, b in pairs))
    raise ConfigError(f"unknown length distribution {name!r}; expected one of {sorted(_DISTRIBUTIONS)}")


# -- records ----------------------------------------------------------------


@dataclass(eq=False)
class Sample:
    uih: np.ndarray
    candidates: list[np.ndarray]
    label: float

    def __post_init__(self) -> None:
        self.uih = np.asarray(self.uih, dtype=ID_DTYPE)
        self.candidates = [np.asarray(c, dtype=ID_DTYPE) for c in self.candidates]
        self.label = float(self.label)

    @property
    def num_candidates(self) -> int:
        return len(self.candidates)

    @property
    def candidate_lens(self) -> list[int]:
        return [len(c) for c in self.candidates]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.uih, other.uih)
            and len(self.candidates) == len(other.candidates)
            and all(np.array_equal(a, b) for a, b in zip(self.candidates, other.candidates))
        )

    def key(self) -> bytes:
        """Hashable identity used for multiset comparisons."""
        return encode_sample(self)


@dataclass
class Batch:
    samples: list[Sample]
    rank: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def uih_lens(self) -> np.ndarray:
        return np.array([len(s.uih) for s in self.samples], dtype=np.int64)

    @property
    def num_candidates(self) -> np.ndarray:
        return np.array([s.num_candidates for s in self.samples], dtype=np.int64)

    @property
    def candidate_lens(self) -> np.ndarray:
        return np.array([n for s in self.samples for n in s.candidate_lens], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64)

    def uih_jagged(self) -> JaggedTensor:
        if not self.samples:
            return JaggedTensor.empty()
        return JaggedTensor(np.concatenate([s.uih for s in self.samples]), self.uih_lens, copy=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Batch):
            return NotImplemented
        return self.rank == other.rank and self.samples == other.samples


# -- spec and generation ------------------------------------------------------


@dataclass
class WorkloadSpec:
    num_ranks: int = 4
    batch_size: int = 32
    max_uih: int = 21000
    length_distribution: Distribution = field(default_factory=LogNormal)
    table_rows: int = 1 << 21
    target_collision_ratio: float | None = 0.05
    seed: int = 0
    num_iterations: int = 10
    num_candidates: Distribution = field(default_factory=lambda: Uniform(1, 8))
    candidate_length: Distribution = field(default_factory=lambda: Uniform(1, 4))
    # per-iteration unique rows as a fraction of the smallest iteration's UIH volume
    unique_fraction: float = 0.5

    def validate(self) -> None:
        for name in ("num_ranks", "batch_size", "table_rows"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_uih < 0 or self.num_iterations < 0:
            raise ConfigError("max_uih and num_iterations must be >= 0")
        r = self.target_collision_ratio
        if r is not None and not 0.0 <= r <= 1.0:
            raise ConfigError(f"target_collision_ratio {r} outside [0, 1]")
        if not 0.0 < self.unique_fraction <= 1.0:
            raise ConfigError("unique_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("length_distribution", "num_candidates", "candidate_length"):
            d[k] = distribution_to_dict(getattr(self, k))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> WorkloadSpec:
        d = dict(d)
        for k in ("length_distribution", "num_candidates", "candidate_length"):
            if k in d and isinstance(d[k], dict):
                d[k] = distribution_from_dict(d[k])
        return cls(**d)


@dataclass
class WorkloadShape:
    """Per-iteration, per-rank sample metadata (no row IDs)."""

    uih_lens: np.ndarray  # [iterations, ranks, batch]
    num_candidates: np.ndarray  # [iterations, ranks, batch]
    candidate_lens: list[np.ndarray]  # per iteration, flattened in (rank, sample, candidate) order
    labels: np.ndarray  # [iterations, ranks, batch]


@dataclass
class Workload:
    spec: WorkloadSpec
    iterations: list[list[Batch]]

    def __iter__(self) -> Iterator[list[Batch]]:
        return iter(self.iterations)

    def __len__(self) -> int:
        return len(self.iterations)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Workload):
            return NotImplemented
        return self.spec.to_dict() == other.spec.to_dict() and self.iterations == other.iterations


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    lengths_ss, ids_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(lengths_ss), np.random.default_rng(ids_ss)


def draw_shape(spec: WorkloadSpec) -> WorkloadShape:
    """Lengths and labels only; cheap enough for 64+ rank sweeps."""
    spec.validate()
    rng, _ = _streams(spec.seed)
    shape = (spec.num_iterations, spec.num_ranks, spec.batch_size)
    uih = np.minimum(spec.length_distribution.draw(rng, shape), spec.max_uih)
    uih = np.maximum(uih, 0)
    ncan = np.maximum(spec.num_candidates.draw(rng, shape), 0)
    cand = []
    for i in range(spec.num_iterations):
        lens = spec.candidate_length.draw(rng, int(ncan[i].sum()))
        cand.append(np.maximum(lens, 1))
    labels = rng.random(shape)
    return WorkloadShape(uih, ncan, cand, labels)


def _fresh_rows(rng: np.random.Generator, table_rows: int, exclude: np.ndarray, count: int) -> np.ndarray:
    if count == 0:
        return np.empty(0, dtype=np.int64)
    picked = np.empty(0, dtype=np.int64)
    while picked.size < count:
        need = count - picked.size
        cand = rng.integers(0, table_rows, size=2 * need + 16, dtype=np.int64)
        cand = cand[~np.isin(cand, exclude)]
        _, first = np.unique(cand, return_index=True)
        cand = cand[np.sort(first)]
        cand = cand[~np.isin(cand, picked)]
        picked = np.concatenate([picked, cand[:need]])
    return picked


def _unique_sets(spec: WorkloadSpec, rng: np.random.Generator, occ: np.ndarray) -> list[np.ndarray]:
    """Per-iteration unique row sets with the targeted consecutive overlap."""
    r = float(spec.target_collision_ratio)
    u = int(math.floor(spec.unique_fraction * int(occ.min())))
    if u < 1:
        raise ConfigError("some iteration has no UIH tokens; collision ratio is undefined")
    shared = int(round(r * u))
    if spec.table_rows < 2 * u - shared:
        raise ConfigError(
            f"table_rows={spec.table_rows} too small: collision ratio {r} with {u} unique rows "
            f"per iteration needs >= {2 * u - shared}"
        )
    sets = [rng.choice(spec.table_rows, size=u, replace=False).astype(np.int64)]
    for _ in range(1, len(occ)):
        prev = sets[-1]
        keep = rng.choice(prev, size=shared, replace=False)
        sets.append(np.concatenate([keep, _fresh_rows(rng, spec.table_rows, prev, u - shared)]))
    return sets


def generate(spec: WorkloadSpec) -> Workload:
    """Deterministic workload for ``spec``; same seed gives identical samples."""
    shape = draw_shape(spec)
    _, rng = _streams(spec.seed)
    occ = shape.uih_lens.reshape(spec.num_iterations, spec.num_ranks * spec.batch_size).sum(axis=1)
    sets = _unique_sets(spec, rng, occ) if spec.target_collision_ratio is not None and len(occ) else None

    iterations: list[list[Batch]] = []
    for i in range(spec.num_iterations):
        n_occ = int(occ[i])
        n_cand = int(shape.candidate_lens[i].sum())
        if sets is None:
            uih_ids = rng.integers(0, spec.table_rows, size=n_occ, dtype=np.int64)
            cand_ids = rng.integers(0, spec.table_rows, size=n_cand, dtype=np.int64)
        else:
            pool = sets[i]
            # every row of the iteration's set shows up at least once
            uih_ids = np.concatenate([rng.permutation(pool), rng.choice(pool, size=n_occ - pool.size)])
            rng.shuffle(uih_ids)
            cand_ids = rng.choice(pool, size=n_cand)
        uih_ids = uih_ids.astype(ID_DTYPE)
        cand_ids = cand_ids.astype(ID_DTYPE)

        lens = shape.uih_lens[i].reshape(-1)
        uih_split = np.split(uih_ids, np.cumsum(lens)[:-1])
        clens = shape.candidate_lens[i]
        cand_split = np.split(cand_ids, np.cumsum(clens)[:-1]) if clens.size else []
        ncan = shape.num_candidates[i].reshape(-1)
        cand_start = np.concatenate([[0], np.cumsum(ncan)])
        batches = []
        for r in range(spec.num_ranks):
            samples = []
            for b in range(spec.batch_size):
                j = r * spec.batch_size + b
                cands = cand_split[cand_start[j] : cand_start[j + 1]]
                samples.append(Sample(uih_split[j], list(cands), shape.labels[i, r, b]))
            batches.append(Batch(samples, rank=r))
        iterations.append(batches)
    return Workload(spec, iterations)


def measure_sparsity(batch: Batch | np.ndarray) -> float:
    """Padding fraction needed to rectangularize the batch to its longest UIH."""
    lens = batch.uih_lens if isinstance(batch, Batch) else np.asarray(batch, dtype=np.int64)
    if lens.size == 0:
        raise ValueError("sparsity of an empty batch is undefined")
    longest = int(lens.max())
    if longest == 0:
        raise ValueError("sparsity undefined: every sample has an empty UIH")
    return 1.0 - float(lens.sum()) / (longest * lens.size)


# -- binary codec -------------------------------------------------------------

MAGIC = b"SQWLOAD1"
_U64 = struct.Struct("<Q")
_REC_HEAD = struct.Struct("<IIIdI")  # iteration, rank, index, label, n_uih


def encode_sample(sample: Sample, iteration: int = 0, rank: int = 0, index: int = 0) -> bytes:
    lens = np.asarray(sample.candidate_lens, dtype="<u4")
    parts = [
        _REC_HEAD.pack(iteration, rank, index, sample.label, len(sample.uih)),
        sample.uih.astype("<u8").tobytes(),
        struct.pack("<I", len(lens)),
        lens.tobytes(),
    ]
    parts.extend(c.astype("<u8").tobytes() for c in sample.candidates)
    return b"".join(parts)


def decode_sample(body: bytes) -> tuple[Sample, int, int, int]:
    """Inverse of :func:`encode_sample`; returns ``(sample, iteration, rank, index)``."""
    view = memoryview(body)
    try:
        it, rank, idx, label, n_uih = _REC_HEAD.unpack_from(view, 0)
        pos = _REC_HEAD.size
        uih = np.frombuffer(view, dtype="<u8", count=n_uih, offset=pos).astype(ID_DTYPE)
        pos += 8 * n_uih
        (n_cand,) = struct.unpack_from("<I", view, pos)
        pos += 4
        lens = np.frombuffer(view, dtype="<u4", count=n_cand, offset=pos).astype(np.int64)
        pos += 4 * n_cand
        cands = []
        for n in lens:
            cands.append(np.frombuffer(view, dtype="<u8", count=int(n), offset=pos).astype(ID_DTYPE))
            pos += 8 * int(n)
    except (struct.error, ValueError) as exc:
        raise WorkloadFormatError(f"malformed sample record: {exc}") from None
    if pos != len(body):
        raise WorkloadFormatError(f"sample record has {len(body) - pos} trailing bytes")
    return Sample(uih, cands, label), it, rank, idx


def pack_records(bodies: list[bytes]) -> bytes:
    return b"".join(_U64.pack(len(b)) + b for b in bodies)


def unpack_records(buf: bytes, start: int = 0) -> Iterator[bytes]:
    pos, k = start, 0
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise WorkloadFormatError(_truncation(k))
        (n,) = _U64.unpack_from(buf, pos)
        if pos + 8 + n > len(buf):
            raise WorkloadFormatError(_truncation(k))
        yield buf[pos + 8 : pos + 8 + n]
        pos += 8 + n
        k += 1


def _truncation(k: int) -> str:
    last = f"record {k - 1}" if k else "none"
    return f"truncated at record {k}; last complete record: {last}"


def dumps(workload: Workload) -> bytes:
    header = json.dumps(workload.spec.to_dict(), sort_keys=True).encode()
    bodies = [
        encode_sample(s, i, batch.rank, j)
        for i, batches in enumerate(workload.iterations)
        for batch in batches
        for j, s in enumerate(batch.samples)
    ]
    return MAGIC + _U64.pack(len(header)) + header + pack_records(bodies)


def loads(buf: bytes) -> Workload:
    if not buf:
        return Workload(WorkloadSpec(num_iterations=0), [])
    if len(buf) < len(MAGIC) + 8 or not buf.startswith(MAGIC):
        raise WorkloadFormatError("not a workload file (bad magic or header)")
    (hlen,) = _U64.unpack_from(buf, len(MAGIC))
    start = len(MAGIC) + 8
    if start + hlen > len(buf):
        raise WorkloadFormatError("truncated header")
    spec = WorkloadSpec.from_dict(json.loads(buf[start : start + hlen]))
    grouped: dict[int, dict[int, list[Sample]]] = {}
    for k, body in enumerate(unpack_records(buf, start + hlen)):
        try:
            sample, it, rank, _ = decode_sample(body)
        except WorkloadFormatError as exc:
            raise WorkloadFormatError(f"record {k}: {exc}") from None
        grouped.setdefault(it, {}).setdefault(rank, []).append(sample)
    iterations = [
        [Batch(samples, rank=r) for r, samples in sorted(grouped[i].items())] for i in sorted(grouped)
    ]
    return Workload(spec, iterations)


def save(workload: Workload, path: str | Path) -> None:
    Path(path).write_bytes(dumps(workload))


def load(path: str | Path) -> Workload:
    return loads(Path(path).read_bytes())
