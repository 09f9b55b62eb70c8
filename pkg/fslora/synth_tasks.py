from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fslora.errors import InfeasiblePartitionError, RangeError, ShapeError
from fslora.numerics import Matrix, RngLike, as_generator, freeze

logger = logging.getLogger(__name__)

TaskKind = Literal["least-squares", "multinomial-logistic"]

_MAGIC = b"FSLD"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIQQQQ")
_KIND_CODES: dict[str, int] = {"least-squares": 0, "multinomial-logistic": 1}
_PARTITION_REDRAWS = 100


class TaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: TaskKind = "least-squares"
    m: int = Field(32, ge=1, description="output dimension (classes for logistic)")
    n: int = Field(32, ge=1, description="input dimension")
    true_rank: int = Field(4, ge=0)
    sample_count: int = Field(4000, ge=1)
    holdout_count: int = Field(512, ge=0, description="evaluation samples drawn from the same W*")
    noise_stddev: float = Field(0.0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _rank_fits(self) -> "TaskSpec":
        if self.true_rank > min(self.m, self.n):
            raise ValueError(f"true_rank {self.true_rank} exceeds min(m, n) = {min(self.m, self.n)}")
        return self


@dataclass(frozen=True)
class Batch:
    kind: TaskKind
    inputs: np.ndarray  # count x n
    targets: np.ndarray  # count x m (least-squares) or count labels

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass(frozen=True)
class Dataset:
    kind: TaskKind
    inputs: np.ndarray
    targets: np.ndarray
    w0: Matrix
    w_star: Matrix
    holdout: Batch | None = None

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def m(self) -> int:
        return int(self.w0.shape[0])

    @property
    def n(self) -> int:
        return int(self.w0.shape[1])

    def full(self) -> Batch:
        return Batch(kind=self.kind, inputs=self.inputs, targets=self.targets)

    def take(self, indices: np.ndarray) -> Batch:
        idx = np.asarray(indices, dtype=np.intp)
        return Batch(kind=self.kind, inputs=self.inputs[idx], targets=self.targets[idx])

    def labels(self) -> np.ndarray:
        if self.kind != "multinomial-logistic":
            raise ShapeError("least-squares datasets carry no class labels")
        return self.targets

    def eval_batch(self) -> Batch:
        if self.holdout is not None and len(self.holdout) > 0:
            return self.holdout
        return self.full()


@dataclass(frozen=True)
class Shard:
    owner: int
    indices: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def _draw_samples(kind: TaskKind, w_star: np.ndarray, count: int, noise: float, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    m, n = w_star.shape
    x = gen.standard_normal((count, n))
    if kind == "least-squares":
        eps = gen.standard_normal((count, m))
        y = x @ w_star.T
        if noise > 0:
            y = y + noise * eps
        return freeze(x), freeze(y)
    logits = x @ w_star.T
    gumbel = gen.gumbel(size=(count, m))
    if noise > 0:
        logits = logits + noise * gumbel
    return freeze(x), freeze(np.argmax(logits, axis=1).astype(np.int64))


def generate_task(spec: TaskSpec, rng: RngLike | None = None) -> Dataset:
    """Synthetic problem whose optimum is a rank-`true_rank` shift of W0.

    W0 ~ N(0, 1/n); B* ~ N(0, 1/m), A* ~ N(0, 1/n) so the shift has
    singular values of order one. Logistic labels use the Gumbel-max
    draw: noise 0 is a pure argmax, noise 1 samples softmax(W* x).
    """
    gen = as_generator(rng) if rng is not None else np.random.default_rng(spec.seed)
    m, n, t = spec.m, spec.n, spec.true_rank
    w0 = gen.standard_normal((m, n)) / np.sqrt(n)
    b_star = gen.standard_normal((m, t)) / np.sqrt(m)
    a_star = gen.standard_normal((t, n)) / np.sqrt(n)
    w_star = w0 + b_star @ a_star if t > 0 else w0.copy()
    w0, w_star = freeze(w0), freeze(w_star)

    x, y = _draw_samples(spec.kind, w_star, spec.sample_count, spec.noise_stddev, gen)
    holdout = None
    if spec.holdout_count > 0:
        hx, hy = _draw_samples(spec.kind, w_star, spec.holdout_count, spec.noise_stddev, gen)
        holdout = Batch(kind=spec.kind, inputs=hx, targets=hy)
    return Dataset(kind=spec.kind, inputs=x, targets=y, w0=w0, w_star=w_star, holdout=holdout)


def loss_and_weight_grad(w: Matrix, batch: Batch) -> tuple[float, Matrix]:
    """Mean sample loss at W and its gradient with respect to W.

    least-squares: 0.5 * |W x - y|^2, G = (W x - y) x^T
    logistic:      cross-entropy of softmax(W x), G = (p - onehot(y)) x^T
    """
    count = len(batch)
    if count == 0:
        raise RangeError("loss needs a non-empty batch")
    if batch.inputs.shape[1] != w.shape[1]:
        raise ShapeError(f"weight {w.shape} does not accept inputs of width {batch.inputs.shape[1]}")

    x = batch.inputs
    z = x @ w.T
    if batch.kind == "least-squares":
        resid = z - batch.targets
        loss = 0.5 * float(np.sum(resid * resid)) / count
        g = resid.T @ x / count
        return loss, freeze(g)

    labels = np.asarray(batch.targets, dtype=np.intp)
    zmax = np.max(z, axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = np.sum(ez, axis=1, keepdims=True)
    lse = (zmax + np.log(denom)).ravel()
    rows = np.arange(count)
    loss = float(np.mean(lse - z[rows, labels]))
    p = ez / denom
    p[rows, labels] -= 1.0
    g = p.T @ x / count
    return max(loss, 0.0), freeze(g)


def sample_batch(shard: Shard, batch_size: int, rng: RngLike) -> np.ndarray:
    """Uniform draw with replacement from the shard (full shard if batch_size <= 0)."""
    if batch_size <= 0:
        return shard.indices
    pos = as_generator(rng).integers(0, len(shard), size=batch_size)
    return shard.indices[pos]


def _largest_remainder(total: int, p: np.ndarray) -> np.ndarray:
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = int(total - counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _size_partition(total: int, n_clients: int, alpha: float, gen: np.random.Generator) -> list[np.ndarray]:
    perm = gen.permutation(total)
    counts = _largest_remainder(total, gen.dirichlet([alpha] * n_clients))
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [perm[bounds[c] : bounds[c + 1]] for c in range(n_clients)]


def _class_partition(labels: np.ndarray, n_clients: int, alpha: float, gen: np.random.Generator) -> list[np.ndarray]:
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        members = gen.permutation(np.flatnonzero(labels == cls))
        counts = _largest_remainder(members.size, gen.dirichlet([alpha] * n_clients))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for c in range(n_clients):
            parts[c].append(members[bounds[c] : bounds[c + 1]])
    return [np.concatenate(p) if p else np.array([], dtype=np.int64) for p in parts]


def _reserve_one_partition(total: int, n_clients: int, alpha: float, gen: np.random.Generator) -> list[np.ndarray]:
    perm = gen.permutation(total)
    seeded, rest = perm[:n_clients], perm[n_clients:]
    counts = _largest_remainder(rest.size, gen.dirichlet([alpha] * n_clients))
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [np.concatenate([[seeded[c]], rest[bounds[c] : bounds[c + 1]]]) for c in range(n_clients)]


def dirichlet_partition(dataset: Dataset, n_clients: int, alpha: float, rng: RngLike) -> list[Shard]:
    """Split sample indices over clients with Dirichlet(alpha) shares.

    Logistic data is split class by class, least-squares data by size. A
    draw that leaves any client empty is redrawn; after a bounded number of
    redraws each client is seeded with one sample before the split.
    """
    total = len(dataset)
    if alpha <= 0:
        raise RangeError(f"alpha must be > 0, got {alpha}")
    if n_clients < 1:
        raise RangeError(f"n_clients must be >= 1, got {n_clients}")
    if total == 0 or n_clients > total:
        raise InfeasiblePartitionError(f"cannot give {n_clients} clients at least one of {total} samples")

    gen = as_generator(rng)
    if n_clients == 1:
        return [Shard(owner=0, indices=freeze(np.arange(total)))]

    parts: list[np.ndarray] | None = None
    for _ in range(_PARTITION_REDRAWS):
        if dataset.kind == "multinomial-logistic":
            cand = _class_partition(dataset.labels(), n_clients, alpha, gen)
        else:
            cand = _size_partition(total, n_clients, alpha, gen)
        if all(p.size > 0 for p in cand):
            parts = cand
            break
    if parts is None:
        logger.debug("dirichlet alpha=%s left empty shards after %d draws; seeding one sample each", alpha, _PARTITION_REDRAWS)
        parts = _reserve_one_partition(total, n_clients, alpha, gen)
    return [Shard(owner=c, indices=freeze(np.sort(p).astype(np.int64))) for c, p in enumerate(parts)]


def _write_block(f, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_block(buf: memoryview, offset: int, count: int) -> tuple[np.ndarray, int]:
    end = offset + 8 * count
    if end > len(buf):
        raise ShapeError("dataset file truncated")
    return np.frombuffer(buf[offset:end], dtype="<f8").astype(np.float64), end


def save_dataset(dataset: Dataset, path: Path) -> None:
    """Flat binary: header of shape counts, then little-endian doubles.

    Order: w0, w_star, train inputs, train targets, holdout inputs, holdout targets.
    Labels are stored as doubles.
    """
    holdout_count = len(dataset.holdout) if dataset.holdout is not None else 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_HEADER.pack(_MAGIC, _FORMAT_VERSION, _KIND_CODES[dataset.kind], len(dataset), holdout_count, dataset.m, dataset.n))
        _write_block(f, dataset.w0)
        _write_block(f, dataset.w_star)
        _write_block(f, dataset.inputs)
        _write_block(f, dataset.targets)
        if dataset.holdout is not None:
            _write_block(f, dataset.holdout.inputs)
            _write_block(f, dataset.holdout.targets)


def load_dataset(path: Path) -> Dataset:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ShapeError("dataset file truncated")
    magic, version, kind_code, count, holdout_count, m, n = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != _FORMAT_VERSION:
        raise ShapeError(f"not a dataset file (magic={magic!r}, version={version})")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind_code not in kinds:
        raise ShapeError(f"unknown task kind code {kind_code}")
    kind: TaskKind = kinds[kind_code]  # type: ignore[assignment]
    width = m if kind == "least-squares" else 1

    buf = memoryview(raw)
    off = _HEADER.size
    w0, off = _read_block(buf, off, m * n)
    w_star, off = _read_block(buf, off, m * n)

    def targets(block: np.ndarray, rows: int) -> np.ndarray:
        if kind == "least-squares":
            return freeze(block.reshape(rows, m))
        return freeze(block.astype(np.int64))

    x, off = _read_block(buf, off, count * n)
    y, off = _read_block(buf, off, count * width)
    holdout = None
    if holdout_count:
        hx, off = _read_block(buf, off, holdout_count * n)
        hy, off = _read_block(buf, off, holdout_count * width)
        holdout = Batch(kind=kind, inputs=freeze(hx.reshape(holdout_count, n)), targets=targets(hy, holdout_count))
    return Dataset(
        kind=kind,
        inputs=freeze(x.reshape(count, n)),
        targets=targets(y, count),
        w0=freeze(w0.reshape(m, n)),
        w_star=freeze(w_star.reshape(m, n)),
        holdout=holdout,
    )


def iid_partition(dataset: Dataset, n_clients: int, rng: RngLike) -> list[Shard]:
    """Random near-equal split of the sample indices."""
    total = len(dataset)
    if n_clients < 1:
        raise RangeError(f"n_clients must be >= 1, got {n_clients}")
    if n_clients > total:
        raise InfeasiblePartitionError(f"cannot give {n_clients} clients at least one of {total} samples")
    perm = as_generator(rng).permutation(total)
    return [Shard(owner=c, indices=freeze(np.sort(p).astype(np.int64))) for c, p in enumerate(np.array_split(perm, n_clients))]
