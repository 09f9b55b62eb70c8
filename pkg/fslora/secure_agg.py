from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from fslora.errors import ProtocolError, ShapeError
from fslora.lora_core import AdapterPair, SparseDelta
from fslora.numerics import RngStream, freeze
from fslora.sketching import Sketch

logger = logging.getLogger(__name__)

# Pair seeds stand in for an out-of-band key agreement. Dropout recovery is not modelled.


@dataclass(frozen=True)
class PairMask:
    i: int
    j: int
    support: tuple[int, ...]  # sorted intersection of the two index sets
    b: np.ndarray  # m x r, nonzero only on support columns
    a: np.ndarray  # r x n, nonzero only on support rows


@dataclass(frozen=True)
class ClientMask:
    client_id: int
    indices: tuple[int, ...]  # the client's own sketch indices
    b: np.ndarray
    a: np.ndarray

    def is_zero(self) -> bool:
        return not (np.any(self.b) or np.any(self.a))


def provision_pair_seeds(client_ids: Sequence[int], rng: RngStream) -> dict[tuple[int, int], int]:
    ids = sorted(int(c) for c in client_ids)
    gen = rng.child("pair-seeds").generator()
    seeds = gen.integers(0, 2**63 - 1, size=max(1, len(ids) * (len(ids) - 1) // 2), dtype=np.int64)
    return {pair: int(seeds[pos]) for pos, pair in enumerate(combinations(ids, 2))}


def _pair_mask(i: int, j: int, si: Sketch, sj: Sketch, seed: int, round: int, m: int, n: int, stddev: float) -> PairMask:
    r = si.spec.r
    support = tuple(sorted(set(si.indices) & set(sj.indices)))
    b = np.zeros((m, r))
    a = np.zeros((r, n))
    if support and stddev > 0:
        idx = np.array(support, dtype=np.intp)
        gen = RngStream(seed=seed, stream=round).generator()
        b[:, idx] = gen.standard_normal((m, idx.size)) * stddev
        a[idx, :] = gen.standard_normal((idx.size, n)) * stddev
    return PairMask(i=i, j=j, support=support, b=freeze(b), a=freeze(a))


def derive_pair_masks(
    sketches: Mapping[int, Sketch],
    pair_seeds: Mapping[tuple[int, int], int],
    *,
    round: int,
    m: int,
    n: int,
    stddev: float = 1.0,
) -> list[PairMask]:
    ids = sorted(sketches)
    ranks = {sketches[c].spec.r for c in ids}
    if len(ranks) > 1:
        raise ShapeError(f"sketches disagree on global rank: {sorted(ranks)}")
    out: list[PairMask] = []
    for i, j in combinations(ids, 2):
        if (i, j) not in pair_seeds:
            raise ProtocolError(f"no pair seed provisioned for clients ({i}, {j})")
        out.append(_pair_mask(i, j, sketches[i], sketches[j], pair_seeds[(i, j)], round, m, n, stddev))
    return out


def derive_masks(
    sketches: Mapping[int, Sketch],
    pair_seeds: Mapping[tuple[int, int], int],
    *,
    round: int,
    m: int,
    n: int,
    stddev: float = 1.0,
) -> dict[int, ClientMask]:
    """R_i = sum_{j>i} M_ij - sum_{j<i} M_ji for every participant."""
    pairs = derive_pair_masks(sketches, pair_seeds, round=round, m=m, n=n, stddev=stddev)
    ids = sorted(sketches)
    if not ids:
        return {}
    r = sketches[ids[0]].spec.r
    acc_b = {c: np.zeros((m, r)) for c in ids}
    acc_a = {c: np.zeros((r, n)) for c in ids}
    for pm in pairs:
        acc_b[pm.i] += pm.b
        acc_a[pm.i] += pm.a
        acc_b[pm.j] -= pm.b
        acc_a[pm.j] -= pm.a
    return {
        c: ClientMask(client_id=c, indices=sketches[c].indices, b=freeze(acc_b[c]), a=freeze(acc_a[c]))
        for c in ids
    }


def canonical_mask_sum(pairs: Sequence[PairMask], m: int, n: int, r: int) -> AdapterPair:
    b = np.zeros((m, r))
    a = np.zeros((r, n))
    for pm in pairs:
        b += pm.b
        b -= pm.b
        a += pm.a
        a -= pm.a
    return AdapterPair(b=b, a=a)


def mask_delta(delta: SparseDelta, mask: ClientMask) -> SparseDelta:
    if mask.b.shape != (delta.m, delta.rank) or mask.a.shape != (delta.rank, delta.n):
        raise ShapeError(f"mask shape {mask.b.shape}/{mask.a.shape} does not match delta")
    own = np.zeros(delta.rank, dtype=bool)
    own[list(delta.indices)] = True
    outside = ~own
    if np.any(mask.b[:, outside]) or np.any(mask.a[outside, :]):
        raise ProtocolError(f"mask for client {mask.client_id} writes outside its index set {delta.indices}")
    idx = np.array(delta.indices, dtype=np.intp)
    return SparseDelta(
        indices=delta.indices,
        b_cols=delta.b_cols + mask.b[:, idx],
        a_rows=delta.a_rows + mask.a[idx, :],
        rank=delta.rank,
        client_id=delta.client_id,
        round=delta.round,
    )


def secure_aggregate(masked: Sequence[SparseDelta], participants: Sequence[int] | None = None) -> AdapterPair:
    # Masks only cancel when every participant that derived one is present.
    if not masked:
        raise ProtocolError("secure aggregation needs at least one masked delta")
    got = sorted(d.client_id for d in masked)
    if len(set(got)) != len(got):
        raise ProtocolError(f"duplicate client uploads: {got}")
    if participants is not None:
        missing = sorted(set(participants) - set(got))
        extra = sorted(set(got) - set(participants))
        if missing:
            raise ProtocolError(f"missing masked uploads from clients {missing}; masks would not cancel")
        if extra:
            raise ProtocolError(f"unexpected uploads from clients {extra}")
    first = masked[0]
    b = np.zeros((first.m, first.rank))
    a = np.zeros((first.rank, first.n))
    for d in sorted(masked, key=lambda x: x.client_id):
        idx = np.array(d.indices, dtype=np.intp)
        b[:, idx] += d.b_cols
        a[idx, :] += d.a_rows
    logger.debug("secure aggregate over %d clients", len(masked))
    return AdapterPair(b=b, a=a)
