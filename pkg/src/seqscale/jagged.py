"""Jagged (variable-length segment) tensors and the reshuffling ops built on them.

A :class:`JaggedTensor` is a flat ``values`` buffer plus per-segment ``lengths``;
``offsets`` are the cached prefix sums. Instances are immutable, so every
operation returns a new tensor with freshly computed offsets.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ID_DTYPE = np.uint64
VALUE_DTYPE = np.float64


class JaggedError(ValueError):
    """Malformed jagged input or out-of-range segment reference."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class JaggedTensor:
    """Flat values partitioned into contiguous segments.

    ``values`` may be 1-D (IDs) or 2-D (one row of ``dim`` scalars per element,
    e.g. embedding rows); segmentation is always along axis 0.
    """

    __slots__ = ("_values", "_lengths", "_offsets")

    def __init__(self, values: np.ndarray, lengths: np.ndarray, copy: bool = True) -> None:
        # copy=False hands ownership of freshly built arrays to the tensor
        values = np.array(values, copy=True) if copy else np.asarray(values)
        lengths = np.array(lengths, dtype=np.int64, copy=copy).reshape(-1)
        if lengths.size and lengths.min() < 0:
            raise JaggedError("segment lengths must be non-negative")
        offsets = np.zeros(lengths.size + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        if values.ndim == 0 or offsets[-1] != values.shape[0]:
            raise JaggedError(
                f"sum(lengths)={int(offsets[-1])} does not match {values.shape[0] if values.ndim else 0} values"
            )
        self._values = _freeze(values)
        self._lengths = _freeze(lengths)
        self._offsets = _freeze(offsets)

    # -- constructors ---------------------------------------------------

    @classmethod
    def from_segments(cls, segments: Iterable[Sequence], dtype=ID_DTYPE) -> JaggedTensor:
        segs = [np.asarray(s, dtype=dtype) for s in segments]
        lengths = np.array([len(s) for s in segs], dtype=np.int64)
        if segs:
            values = np.concatenate(segs) if any(len(s) for s in segs) else np.empty(
                (0,) + segs[0].shape[1:], dtype=dtype
            )
        else:
            values = np.empty(0, dtype=dtype)
        return cls(values, lengths)

    @classmethod
    def empty(cls, dtype=ID_DTYPE, row_shape: tuple[int, ...] = ()) -> JaggedTensor:
        return cls(np.empty((0,) + row_shape, dtype=dtype), np.empty(0, dtype=np.int64))

    # -- accessors ------------------------------------------------------

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def lengths(self) -> np.ndarray:
        return self._lengths

    @property
    def offsets(self) -> np.ndarray:
        return self._offsets

    @property
    def num_segments(self) -> int:
        return int(self._lengths.size)

    @property
    def row_shape(self) -> tuple[int, ...]:
        return tuple(self._values.shape[1:])

    def segment(self, k: int) -> np.ndarray:
        if not 0 <= k < self.num_segments:
            raise JaggedError(f"segment index {k} out of range [0, {self.num_segments})")
        return self._values[self._offsets[k] : self._offsets[k + 1]]

    def to_list(self) -> list[list]:
        return [self.segment(k).tolist() for k in range(self.num_segments)]

    def check_invariants(self) -> None:
        assert int(self._lengths.sum()) == self._values.shape[0]
        assert self._offsets[0] == 0
        assert np.array_equal(np.diff(self._offsets), self._lengths)

    def __len__(self) -> int:
        return self.num_segments

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, JaggedTensor):
            return NotImplemented
        return (
            self._values.dtype == other._values.dtype
            and self._values.shape == other._values.shape
            and np.array_equal(self._lengths, other._lengths)
            and np.array_equal(self._values, other._values)
        )

    def __hash__(self) -> int:  # immutable, but arrays are not hashable
        return hash((self._values.tobytes(), self._lengths.tobytes()))

    def __repr__(self) -> str:
        return f"JaggedTensor(segments={self.num_segments}, values={self._values.shape[0]}, dtype={self._values.dtype})"


def _gather_segments(t: JaggedTensor, seg_idx: np.ndarray) -> JaggedTensor:
    """Copy segments ``seg_idx`` (in order) into a new contiguous tensor."""
    lengths = t.lengths[seg_idx]
    total = int(lengths.sum())
    if total == 0:
        return JaggedTensor(np.empty((0,) + t.row_shape, dtype=t.values.dtype), lengths)
    # element index = source segment start + position within segment
    out_offsets = np.zeros(lengths.size, dtype=np.int64)
    np.cumsum(lengths[:-1], out=out_offsets[1:])
    starts = np.repeat(t.offsets[:-1][seg_idx] - out_offsets, lengths)
    elem = starts + np.arange(total, dtype=np.int64)
    return JaggedTensor(t.values[elem], lengths, copy=False)


def indexed_permute(t: JaggedTensor, perm: Sequence[int] | np.ndarray) -> JaggedTensor:
    """Output segment ``j`` is input segment ``perm[j]``; repetition is allowed."""
    idx = np.asarray(perm, dtype=np.int64).reshape(-1)
    bad = np.flatnonzero((idx < 0) | (idx >= t.num_segments))
    if bad.size:
        j = int(bad[0])
        raise JaggedError(f"perm[{j}]={int(idx[j])} is not a valid segment index (have {t.num_segments})")
    return _gather_segments(t, idx)


def ranged_dispatch(t: JaggedTensor, ranges: Sequence[tuple[int, int]]) -> list[JaggedTensor]:
    """Split ``t`` into one tensor per ``(segment_start, segment_count)`` range.

    Ranges must be in bounds and pairwise disjoint; they need not cover ``t``.
    """
    spans = []
    for d, (start, count) in enumerate(ranges):
        start, count = int(start), int(count)
        if count < 0 or start < 0 or start + count > t.num_segments:
            raise JaggedError(f"range {d}=({start}, {count}) out of bounds for {t.num_segments} segments")
        spans.append((start, start + count, d))
    nonempty = sorted(s for s in spans if s[1] > s[0])
    for (a0, a1, da), (b0, b1, db) in zip(nonempty, nonempty[1:]):
        if b0 < a1:
            raise JaggedError(f"ranges {da} and {db} overlap")
    out = []
    off = t.offsets
    for start, stop, _ in spans:
        out.append(JaggedTensor(t.values[off[start] : off[stop]], t.lengths[start:stop]))
    return out


def ranged_combine(parts: Sequence[JaggedTensor]) -> JaggedTensor:
    """Concatenate segments of ``parts`` in order."""
    if not parts:
        return JaggedTensor.empty()
    dtypes = {p.values.dtype for p in parts}
    shapes = {p.row_shape for p in parts}
    if len(dtypes) > 1 or len(shapes) > 1:
        raise JaggedError(f"incompatible parts: dtypes={dtypes}, row shapes={shapes}")
    return JaggedTensor(
        np.concatenate([p.values for p in parts]),
        np.concatenate([p.lengths for p in parts]),
        copy=False,
    )


class Layout(enum.Enum):
    FEATURE_MAJOR = "feature_major"
    BATCH_MAJOR = "batch_major"


@dataclass(frozen=True, eq=False)
class KeyedJaggedTensor:
    """Per-(feature, sample) segments under one of two orderings.

    Feature-major puts segment ``(f, s)`` at ``f * num_samples + s``; batch-major
    at ``s * len(keys) + f``.
    """

    keys: tuple[str, ...]
    inner: JaggedTensor
    layout: Layout
    num_samples: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "keys", tuple(self.keys))
        if self.inner.num_segments != len(self.keys) * self.num_samples:
            raise JaggedError(
                f"{self.inner.num_segments} segments != {len(self.keys)} keys x {self.num_samples} samples"
            )

    def segment(self, feature: int, sample: int) -> np.ndarray:
        n_f = len(self.keys)
        if self.layout is Layout.FEATURE_MAJOR:
            return self.inner.segment(feature * self.num_samples + sample)
        return self.inner.segment(sample * n_f + feature)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KeyedJaggedTensor):
            return NotImplemented
        return (
            self.keys == other.keys
            and self.layout == other.layout
            and self.num_samples == other.num_samples
            and self.inner == other.inner
        )


def keyed_transpose(kt: KeyedJaggedTensor) -> KeyedJaggedTensor:
    """Flip between feature-major and batch-major segment order."""
    n_f = len(kt.keys)
    if n_f == 0 or kt.inner.num_segments % n_f:
        raise JaggedError(f"{kt.inner.num_segments} segments not divisible by {n_f} keys")
    n_s = kt.inner.num_segments // n_f
    grid = np.arange(n_f * n_s, dtype=np.int64)
    if kt.layout is Layout.FEATURE_MAJOR:
        # batch-major slot s*F+f takes feature-major segment f*S+s
        perm = grid.reshape(n_f, n_s).T.reshape(-1)
        layout = Layout.BATCH_MAJOR
    else:
        perm = grid.reshape(n_s, n_f).T.reshape(-1)
        layout = Layout.FEATURE_MAJOR
    return KeyedJaggedTensor(kt.keys, _gather_segments(kt.inner, perm), layout, n_s)
