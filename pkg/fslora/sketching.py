from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from fslora.errors import DegenerateScoresError, RangeError, ShapeError
from fslora.numerics import Matrix, RngLike, as_generator, freeze

ImportanceMetric = Literal["norm-product", "norm-sum"]


@dataclass(frozen=True)
class SketchSpec:
    r: int
    k: int

    def __post_init__(self) -> None:
        if self.r < 1 or self.k < 1 or self.k > self.r:
            raise RangeError(f"sketch spec needs 1 <= k <= r, got r={self.r} k={self.k}")

    @property
    def ratio(self) -> float:
        return self.k / self.r


@dataclass(frozen=True)
class Sketch:
    """Random-k diagonal sketch: `k` active indices of `r`, each scaled by r/k.

    Indices are kept sorted so equal index sets compare and serialize equal.
    """

    spec: SketchSpec
    indices: tuple[int, ...]
    _index_array: np.ndarray = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.indices)
        if len(idx) != self.spec.k:
            raise RangeError(f"sketch needs {self.spec.k} indices, got {len(idx)}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise RangeError(f"sketch indices must be strictly increasing: {idx}")
        if idx and (idx[0] < 0 or idx[-1] >= self.spec.r):
            raise RangeError(f"sketch indices must lie in [0, {self.spec.r}): {idx}")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "_index_array", freeze(np.array(idx, dtype=np.intp)))

    @property
    def scale(self) -> float:
        return self.spec.r / self.spec.k

    @property
    def index_array(self) -> np.ndarray:
        return self._index_array

    def mask(self) -> np.ndarray:
        out = np.zeros(self.spec.r, dtype=bool)
        out[self._index_array] = True
        return out

    def complement(self) -> np.ndarray:
        return np.flatnonzero(~self.mask())

    @property
    def is_identity(self) -> bool:
        return self.spec.k == self.spec.r


def identity_sketch(r: int) -> Sketch:
    return Sketch(spec=SketchSpec(r=r, k=r), indices=tuple(range(r)))


def sample_random_k(spec: SketchSpec, rng: RngLike) -> Sketch:
    gen = as_generator(rng)
    chosen = gen.choice(spec.r, size=spec.k, replace=False)
    return Sketch(spec=spec, indices=tuple(sorted(int(i) for i in chosen)))


def dense_diagonal(s: Sketch) -> Matrix:
    d = np.zeros((s.spec.r, s.spec.r))
    d[s.index_array, s.index_array] = s.scale
    return freeze(d)


def apply_right(b: Matrix, s: Sketch) -> Matrix:
    """B @ S: active columns scaled by r/k, the rest zeroed."""
    if b.ndim != 2 or b.shape[1] != s.spec.r:
        raise ShapeError(f"apply_right needs {s.spec.r} columns, got shape {b.shape}")
    out = np.zeros_like(b, dtype=np.float64)
    idx = s.index_array
    out[:, idx] = b[:, idx] * s.scale
    return freeze(out)


def apply_left(a: Matrix, s: Sketch) -> Matrix:
    """S @ A: active rows scaled by r/k, the rest zeroed."""
    if a.ndim != 2 or a.shape[0] != s.spec.r:
        raise ShapeError(f"apply_left needs {s.spec.r} rows, got shape {a.shape}")
    out = np.zeros_like(a, dtype=np.float64)
    idx = s.index_array
    out[idx, :] = a[idx, :] * s.scale
    return freeze(out)


def importance_scores(b: Matrix, a: Matrix, metric: ImportanceMetric) -> np.ndarray:
    if b.shape[1] != a.shape[0]:
        raise ShapeError(f"adapter ranks disagree: b {b.shape}, a {a.shape}")
    bn = np.linalg.norm(b, axis=0)
    an = np.linalg.norm(a, axis=1)
    if metric == "norm-product":
        return bn * an
    if metric == "norm-sum":
        return bn + an
    raise RangeError(f"unknown importance metric: {metric}")


def sample_importance(b: Matrix, a: Matrix, k: int, metric: ImportanceMetric, rng: RngLike) -> Sketch:
    """Draw k rank-one components without replacement, weighted by importance.

    The scale stays r/k, which is biased under non-uniform selection.
    """
    scores = importance_scores(b, a, metric)
    spec = SketchSpec(r=int(scores.shape[0]), k=k)
    if k == spec.r:
        return identity_sketch(spec.r)
    total = float(scores.sum())
    if not np.isfinite(total) or total <= 0:
        raise DegenerateScoresError("all importance scores are zero")

    gen = as_generator(rng)
    positive = np.flatnonzero(scores > 0)
    if positive.size <= k:
        # Every scored component is taken; the remainder is filled uniformly.
        rest = np.flatnonzero(scores <= 0)
        fill = gen.choice(rest, size=k - positive.size, replace=False) if k > positive.size else np.array([], dtype=int)
        chosen = np.concatenate([positive, fill])
    else:
        chosen = gen.choice(spec.r, size=k, replace=False, p=scores / total)
    return Sketch(spec=spec, indices=tuple(sorted(int(i) for i in chosen)))


def encode_indices(s: Sketch) -> np.ndarray:
    return s.mask()


def decode_indices(bits: np.ndarray, spec: SketchSpec) -> Sketch:
    bits = np.asarray(bits, dtype=bool)
    if bits.shape != (spec.r,):
        raise ShapeError(f"expected {spec.r} bits, got {bits.shape}")
    return Sketch(spec=spec, indices=tuple(int(i) for i in np.flatnonzero(bits)))


def bits_to_str(bits: np.ndarray) -> str:
    return "".join("1" if b else "0" for b in np.asarray(bits, dtype=bool))


def pack_bits(bits: np.ndarray) -> bytes:
    """Little-endian bit packing: bit j lives in byte j // 8 at position j % 8."""
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def unpack_bits(data: bytes, r: int) -> np.ndarray:
    if len(data) != index_bytes(r):
        raise ShapeError(f"expected {index_bytes(r)} bytes for r={r}, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little", count=r).astype(bool)


def index_bytes(r: int) -> int:
    return (r + 7) // 8


def second_moment_matrix(r: int, k: int) -> Matrix:
    """E[s_j s_l] for the random-k diagonal entries s: r/k on the diagonal."""
    spec = SketchSpec(r=r, k=k)
    off = 0.0 if r == 1 else r * (k - 1) / (k * (r - 1))
    q = np.full((spec.r, spec.r), off)
    np.fill_diagonal(q, r / k)
    return freeze(q)
