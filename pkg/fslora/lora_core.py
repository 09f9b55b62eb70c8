from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fslora.errors import ContractViolation, NumericalError, RangeError, ShapeError
from fslora.numerics import Matrix, RngLike, content_hash, freeze, gaussian_matrix
from fslora.sketching import Sketch, apply_left, apply_right


@dataclass(frozen=True)
class FrozenBase:
    w0: Matrix

    def __post_init__(self) -> None:
        w = np.array(self.w0, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError(f"base must be 2-D, got {w.shape}")
        object.__setattr__(self, "w0", freeze(w))

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape  # type: ignore[return-value]

    def checksum(self) -> str:
        return content_hash(self.w0)


@dataclass(frozen=True)
class AdapterPair:
    b: Matrix  # m x r
    a: Matrix  # r x n

    def __post_init__(self) -> None:
        b = np.array(self.b, dtype=np.float64)
        a = np.array(self.a, dtype=np.float64)
        if b.ndim != 2 or a.ndim != 2 or b.shape[1] != a.shape[0]:
            raise ShapeError(f"adapter shapes disagree: b {b.shape}, a {a.shape}")
        object.__setattr__(self, "b", freeze(b))
        object.__setattr__(self, "a", freeze(a))

    @property
    def rank(self) -> int:
        return int(self.b.shape[1])

    @property
    def m(self) -> int:
        return int(self.b.shape[0])

    @property
    def n(self) -> int:
        return int(self.a.shape[1])

    def product(self) -> Matrix:
        return freeze(self.b @ self.a)


@dataclass(frozen=True)
class AdapterGrads:
    gb: Matrix
    ga: Matrix


@dataclass(frozen=True)
class SparseDelta:
    """A client's round update: the touched columns of dB and rows of dA."""

    indices: tuple[int, ...]
    b_cols: Matrix  # m x k, column j belongs to indices[j]
    a_rows: Matrix  # k x n
    rank: int
    client_id: int = 0
    round: int = 0

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.indices)
        b_cols = np.array(self.b_cols, dtype=np.float64)
        a_rows = np.array(self.a_rows, dtype=np.float64)
        if b_cols.ndim != 2 or a_rows.ndim != 2:
            raise ShapeError("delta payloads must be 2-D")
        if b_cols.shape[1] != len(idx) or a_rows.shape[0] != len(idx):
            raise ShapeError(f"delta payload {b_cols.shape}/{a_rows.shape} does not match {len(idx)} indices")
        if any(j <= i for i, j in zip(idx, idx[1:])) or (idx and (idx[0] < 0 or idx[-1] >= self.rank)):
            raise RangeError(f"delta indices must be sorted, unique and < {self.rank}: {idx}")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "b_cols", freeze(b_cols))
        object.__setattr__(self, "a_rows", freeze(a_rows))

    @property
    def m(self) -> int:
        return int(self.b_cols.shape[0])

    @property
    def n(self) -> int:
        return int(self.a_rows.shape[1])

    @property
    def payload_size(self) -> int:
        return int(self.b_cols.size + self.a_rows.size)

    def payload(self) -> np.ndarray:
        return np.concatenate([self.b_cols.ravel(), self.a_rows.ravel()])

    def with_payload(self, flat: np.ndarray) -> "SparseDelta":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.payload_size,):
            raise ShapeError(f"payload must have {self.payload_size} entries, got {flat.shape}")
        nb = self.b_cols.size
        return SparseDelta(
            indices=self.indices,
            b_cols=flat[:nb].reshape(self.b_cols.shape),
            a_rows=flat[nb:].reshape(self.a_rows.shape),
            rank=self.rank,
            client_id=self.client_id,
            round=self.round,
        )


def init_adapters(m: int, n: int, r: int, rng: RngLike) -> AdapterPair:
    """Classical LoRA start: B = 0, A ~ N(0, 1/r), so W0 + BA == W0."""
    a = gaussian_matrix(r, n, rng, 1.0 / np.sqrt(r))
    return AdapterPair(b=np.zeros((m, r)), a=a)


def _check_shapes(base: FrozenBase, ad: AdapterPair, s: Sketch | None = None) -> None:
    m, n = base.shape
    if ad.m != m or ad.n != n:
        raise ShapeError(f"adapters {ad.m}x{ad.rank} / {ad.rank}x{ad.n} do not fit base {m}x{n}")
    if s is not None and s.spec.r != ad.rank:
        raise ShapeError(f"sketch over r={s.spec.r} does not match adapter rank {ad.rank}")


def effective_weight(base: FrozenBase, ad: AdapterPair, s: Sketch, *, lora_scale: float = 1.0) -> Matrix:
    _check_shapes(base, ad, s)
    update = apply_right(ad.b, s) @ ad.a
    if lora_scale != 1.0:
        update = lora_scale * update
    return freeze(base.w0 + update)


def unsketched_weight(base: FrozenBase, ad: AdapterPair, *, lora_scale: float = 1.0) -> Matrix:
    _check_shapes(base, ad)
    update = ad.b @ ad.a
    if lora_scale != 1.0:
        update = lora_scale * update
    return freeze(base.w0 + update)


def adapter_grads(g: Matrix, ad: AdapterPair, s: Sketch, *, lora_scale: float = 1.0) -> AdapterGrads:
    """Chain rule through W0 + B S A: gB = G A^T S, gA = S B^T G."""
    if g.shape != (ad.m, ad.n):
        raise ShapeError(f"weight gradient {g.shape} does not match {ad.m}x{ad.n}")
    if s.spec.r != ad.rank:
        raise ShapeError(f"sketch over r={s.spec.r} does not match adapter rank {ad.rank}")
    if lora_scale != 1.0:
        g = lora_scale * g
    gb = apply_right(g @ ad.a.T, s)
    ga = apply_left(ad.b.T @ g, s)
    return AdapterGrads(gb=gb, ga=ga)


def plain_lora_grads(g: Matrix, ad: AdapterPair, *, lora_scale: float = 1.0) -> AdapterGrads:
    if lora_scale != 1.0:
        g = lora_scale * g
    return AdapterGrads(gb=freeze(g @ ad.a.T), ga=freeze(ad.b.T @ g))


def sgd_step(ad: AdapterPair, grads: AdapterGrads, lr: float) -> AdapterPair:
    if lr <= 0:
        raise RangeError(f"learning rate must be > 0, got {lr}")
    if grads.gb.shape != ad.b.shape or grads.ga.shape != ad.a.shape:
        raise ShapeError(f"gradient shapes {grads.gb.shape}/{grads.ga.shape} do not match adapters {ad.b.shape}/{ad.a.shape}")
    if not (np.all(np.isfinite(grads.gb)) and np.all(np.isfinite(grads.ga))):
        raise NumericalError("non-finite adapter gradient")
    return AdapterPair(b=ad.b - lr * grads.gb, a=ad.a - lr * grads.ga)


def extract_delta(before: AdapterPair, after: AdapterPair, s: Sketch, *, client_id: int = 0, round: int = 0) -> SparseDelta:
    if before.b.shape != after.b.shape or before.a.shape != after.a.shape:
        raise ShapeError("before/after adapters differ in shape")
    if s.spec.r != before.rank:
        raise ShapeError(f"sketch over r={s.spec.r} does not match adapter rank {before.rank}")
    db = after.b - before.b
    da = after.a - before.a
    outside = s.complement()
    if outside.size and (np.any(db[:, outside] != 0) or np.any(da[outside, :] != 0)):
        raise ContractViolation(f"client {client_id} round {round}: update leaked outside sketch indices {s.indices}")
    idx = s.index_array
    return SparseDelta(
        indices=s.indices,
        b_cols=db[:, idx],
        a_rows=da[idx, :],
        rank=s.spec.r,
        client_id=client_id,
        round=round,
    )


def densify(delta: SparseDelta) -> AdapterPair:
    db = np.zeros((delta.m, delta.rank))
    da = np.zeros((delta.rank, delta.n))
    idx = np.array(delta.indices, dtype=np.intp)
    db[:, idx] = delta.b_cols
    da[idx, :] = delta.a_rows
    return AdapterPair(b=db, a=da)
