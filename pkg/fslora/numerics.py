from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np
import numpy.typing as npt

from fslora.errors import NumericalError, RangeError, ShapeError

Matrix = npt.NDArray[np.float64]

_U64 = (1 << 64) - 1
_SVD_ATTEMPTS = 3


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream id).

    Two streams with the same pair produce identical draws no matter which
    thread or in which order they are consumed. Derive per-client / per-round
    streams with `child`; never share one `generator()` across clients.
    """

    seed: int
    stream: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed", int(self.seed) & _U64)
        object.__setattr__(self, "stream", int(self.stream) & _U64)

    def child(self, *labels: object) -> "RngStream":
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<Q", self.stream))
        for label in labels:
            h.update(b"\x1f")
            h.update(str(label).encode("utf-8"))
        return RngStream(seed=self.seed, stream=int.from_bytes(h.digest(), "little"))

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


RngLike = Union[RngStream, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def freeze(a: np.ndarray) -> Matrix:
    a.setflags(write=False)
    return a


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> Matrix:
    a = np.array(values, dtype=np.float64)
    if rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ShapeError(f"expected {rows}x{cols}={rows * cols} values, got {a.size}")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got shape {a.shape}")
    return freeze(a)


def _shape(m: np.ndarray) -> str:
    return "x".join(str(d) for d in m.shape)


def check_finite(m: np.ndarray, what: str = "matrix") -> None:
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{what} contains non-finite entries")


def matmul(lhs: Matrix, rhs: Matrix) -> Matrix:
    if lhs.ndim != 2 or rhs.ndim != 2 or lhs.shape[1] != rhs.shape[0]:
        raise ShapeError(f"cannot multiply {_shape(lhs)} by {_shape(rhs)}")
    # Summed in inner-index order: equal bit for bit to the naive triple loop.
    out = np.zeros((lhs.shape[0], rhs.shape[1]))
    for k in range(lhs.shape[1]):
        out += np.multiply.outer(lhs[:, k], rhs[k, :])
    return freeze(out)


def _canonical_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Largest-magnitude entry of each left vector is made positive so replays agree.
    if u.size == 0:
        return u, vt
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def truncated_svd(m: Matrix, target_rank: int) -> tuple[Matrix, Matrix, Matrix]:
    """Best Frobenius rank-`target_rank` factors of `m`.

    Returns (U, S, V) with U rows x t, S length t (non-increasing), V cols x t,
    so that U @ diag(S) @ V.T is the Eckart-Young approximation.
    """
    rows, cols = m.shape
    if target_rank < 1 or target_rank > min(rows, cols):
        raise RangeError(f"target_rank {target_rank} outside [1, {min(rows, cols)}] for {rows}x{cols}")
    check_finite(m, "svd input")

    a = np.asarray(m, dtype=np.float64)
    last: Exception | None = None
    for attempt in range(1, _SVD_ATTEMPTS + 1):
        try:
            if attempt == 1:
                u, s, vt = np.linalg.svd(a, full_matrices=False)
            elif attempt == 2:
                ut, s, v = np.linalg.svd(a.T, full_matrices=False)
                u, vt = v.T, ut.T
            else:
                scale = float(np.max(np.abs(a))) or 1.0
                u, s, vt = np.linalg.svd(a / scale, full_matrices=False)
                s = s * scale
            break
        except np.linalg.LinAlgError as e:
            last = e
    else:
        raise NumericalError(f"svd did not converge: {last}", iterations=_SVD_ATTEMPTS)

    u, vt = _canonical_signs(u[:, :target_rank], vt[:target_rank, :])
    return freeze(np.ascontiguousarray(u)), freeze(s[:target_rank].copy()), freeze(np.ascontiguousarray(vt.T))


def gaussian_matrix(rows: int, cols: int, rng: RngLike, stddev: float) -> Matrix:
    if stddev < 0:
        raise RangeError(f"stddev must be >= 0, got {stddev}")
    draws = as_generator(rng).standard_normal((rows, cols))
    if stddev == 0:
        return freeze(np.zeros((rows, cols)))
    return freeze(draws * stddev)


def frobenius(m: np.ndarray) -> float:
    return float(np.linalg.norm(m))


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    denom = frobenius(exact)
    diff = frobenius(np.asarray(approx) - np.asarray(exact))
    return diff / denom if denom > 0 else diff


def content_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        c = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(c.shape).encode("ascii"))
        h.update(c.tobytes())
    return h.hexdigest()
