from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from fslora.costs import CostLedger, bitmap_bytes, encode_wire, topk_kept
from fslora.errors import RangeError, ShapeError
from fslora.federation import (
    ClientConfig,
    EngineOptions,
    ExperimentResult,
    GlobalState,
    RoundCallback,
    RoundMetrics,
    initial_state,
    resolve_denominator,
    run_local_steps,
    select_participants,
)
from fslora.lora_core import AdapterPair, FrozenBase, SparseDelta, init_adapters, plain_lora_grads, unsketched_weight
from fslora.numerics import Matrix, RngLike, RngStream, as_generator, freeze, truncated_svd
from fslora.sketching import pack_bits
from fslora.synth_tasks import Dataset, loss_and_weight_grad

logger = logging.getLogger(__name__)

BaselineTag = Literal["fedlora", "heterolora", "flexlora", "flora"]
BASELINES: tuple[str, ...] = ("fedlora", "heterolora", "flexlora", "flora")


@dataclass(frozen=True)
class BaselineKind:
    tag: BaselineTag
    ks: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.tag not in BASELINES:
            raise RangeError(f"unknown baseline: {self.tag}")
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if self.tag == "fedlora" and len(set(self.ks)) > 1:
            raise RangeError(f"fedlora needs one rank for every client, got {sorted(set(self.ks))}")


# ---- top-k upload compression ----


def topk_indices(payload: np.ndarray, ratio: float) -> np.ndarray:
    """Flat positions of the largest-magnitude entries; ties go to the lower position."""
    if not (0 < ratio <= 1):
        raise RangeError(f"top-k ratio must be in (0, 1], got {ratio}")
    flat = np.asarray(payload, dtype=np.float64).ravel()
    if flat.size == 0:
        return np.array([], dtype=np.intp)
    order = np.argsort(-np.abs(flat), kind="stable")
    return np.sort(order[: topk_kept(flat.size, ratio)])


def topk_compress(delta: SparseDelta, ratio: float) -> SparseDelta:
    if not (0 < ratio <= 1):
        raise RangeError(f"top-k ratio must be in (0, 1], got {ratio}")
    if ratio == 1:
        return delta
    flat = delta.payload()
    kept = np.zeros_like(flat)
    idx = topk_indices(flat, ratio)
    kept[idx] = flat[idx]
    return delta.with_payload(kept)


def encode_topk_payload(delta: SparseDelta, ratio: float) -> bytes:
    """Wire form of a compressed delta: kept values as float32, then a keep bitmap."""
    flat = delta.payload()
    idx = topk_indices(flat, ratio)
    keep = np.zeros(flat.size, dtype=bool)
    keep[idx] = True
    data = encode_wire(flat[idx]) + pack_bits(keep)
    if len(data) != 4 * idx.size + bitmap_bytes(flat.size):
        raise ShapeError(f"top-k payload encoded to {len(data)} bytes")
    return data


# ---- HeteroLoRA ----


def truncate(pair: AdapterPair, k: int) -> AdapterPair:
    if k < 1 or k > pair.rank:
        raise RangeError(f"cannot truncate rank {pair.rank} to {k}")
    return AdapterPair(b=pair.b[:, :k], a=pair.a[:k, :])


def pad(pair: AdapterPair, r: int) -> AdapterPair:
    if pair.rank > r:
        raise RangeError(f"local rank {pair.rank} exceeds global rank {r}")
    if pair.rank == r:
        return pair
    b = np.zeros((pair.m, r))
    a = np.zeros((r, pair.n))
    b[:, : pair.rank] = pair.b
    a[: pair.rank, :] = pair.a
    return AdapterPair(b=b, a=a)


def heterolora_aggregate(
    r: int,
    locals: Sequence[AdapterPair],
    *,
    reference: AdapterPair | None = None,
    denom: int | None = None,
) -> AdapterPair:
    if not locals:
        raise RangeError("heterolora needs at least one local pair")
    padded = [pad(p, r) for p in locals]
    m, n = padded[0].m, padded[0].n
    if any(p.m != m or p.n != n for p in padded):
        raise ShapeError("local pairs disagree on m x n")
    denom = denom or len(padded)
    if reference is None:
        b = np.zeros((m, r))
        a = np.zeros((r, n))
        for p in padded:
            b += p.b
            a += p.a
        return AdapterPair(b=b / denom, a=a / denom)
    tb = np.zeros((m, r))
    ta = np.zeros((r, n))
    for p in padded:
        tb += p.b - reference.b
        ta += p.a - reference.a
    return AdapterPair(b=reference.b + tb / denom, a=reference.a + ta / denom)


# ---- FlexLoRA ----


def average_product(locals: Sequence[AdapterPair], denom: int | None = None) -> Matrix:
    if not locals:
        raise RangeError("flexlora needs at least one local pair")
    m, n = locals[0].m, locals[0].n
    total = np.zeros((m, n))
    for p in locals:
        if p.m != m or p.n != n:
            raise ShapeError(f"product {p.m}x{p.n} does not match {m}x{n}")
        total += p.b @ p.a
    return freeze(total / (denom or len(locals)))


def svd_pair(m: Matrix, k: int, *, width: int | None = None) -> AdapterPair:
    """B = U diag(S), A = V^T at rank min(k, min(m.shape)), zero-padded to `width`."""
    t = min(k, min(m.shape))
    u, s, v = truncated_svd(m, t)
    pair = AdapterPair(b=u * s, a=v.T)
    return pad(pair, width) if width is not None and width > t else pair


def flexlora_aggregate(locals: Sequence[AdapterPair], ranks: Sequence[int], *, denom: int | None = None) -> list[AdapterPair]:
    if len(ranks) != len(locals):
        raise RangeError(f"{len(ranks)} ranks for {len(locals)} local pairs")
    mbar = average_product(locals, denom)
    top = svd_pair(mbar, max(ranks))
    return [truncate(top, min(k, top.rank)) for k in ranks]


# ---- FLoRA ----


@dataclass(frozen=True)
class FloraRound:
    bases: list[Matrix]
    adapters: list[AdapterPair]


def stack_modules(locals: Sequence[AdapterPair]) -> tuple[Matrix, Matrix]:
    if not locals:
        raise RangeError("flora needs at least one local pair")
    m, n = locals[0].m, locals[0].n
    if any(p.m != m or p.n != n for p in locals):
        raise ShapeError("local pairs disagree on m x n")
    return freeze(np.hstack([p.b for p in locals])), freeze(np.vstack([p.a for p in locals]))


def flora_round(
    bases: Sequence[Matrix],
    locals: Sequence[AdapterPair],
    ranks: Sequence[int],
    rng: RngLike | Sequence[RngLike],
    *,
    denom: int | None = None,
) -> FloraRound:
    """Merge (1/N) Concat(B) Concat(A) into every base and restart the adapters at rank k_i.

    `rng` is one stream for all restarts or one per entry of `ranks`.
    """
    b_cat, a_cat = stack_modules(locals)
    merged = b_cat @ a_cat / (denom or len(locals))
    out_bases: list[Matrix] = []
    for w in bases:
        if w.shape != merged.shape:
            raise ShapeError(f"base {w.shape} does not match stacked product {merged.shape}")
        out_bases.append(freeze(w + merged))
    m, n = merged.shape
    if isinstance(rng, (list, tuple)):
        if len(rng) != len(ranks):
            raise RangeError(f"{len(rng)} streams for {len(ranks)} ranks")
        adapters = [init_adapters(m, n, k, s) for k, s in zip(ranks, rng)]
    else:
        gen = as_generator(rng)
        adapters = [init_adapters(m, n, k, gen) for k in ranks]
    return FloraRound(bases=out_bases, adapters=adapters)


# ---- driver ----


def _eval(base: Matrix, pair: AdapterPair, dataset: Dataset, lora_scale: float) -> float:
    loss, _ = loss_and_weight_grad(unsketched_weight(FrozenBase(base), pair, lora_scale=lora_scale), dataset.eval_batch())
    return loss


def _train(
    start: AdapterPair,
    base: Matrix,
    cfg: ClientConfig,
    dataset: Dataset,
    rng: RngStream,
    round: int,
    lora_scale: float,
):
    frozen = FrozenBase(base)

    def weight_fn(ad: AdapterPair) -> np.ndarray:
        return unsketched_weight(frozen, ad, lora_scale=lora_scale)

    def grad_fn(g: np.ndarray, ad: AdapterPair) -> tuple[np.ndarray, np.ndarray]:
        grads = plain_lora_grads(g, ad, lora_scale=lora_scale)
        return grads.gb, grads.ga

    return run_local_steps(start, cfg, dataset, rng, round=round, grad_fn=grad_fn, weight_fn=weight_fn)


def run_baseline(
    method: str,
    options: EngineOptions,
    dataset: Dataset,
    clients: Sequence[ClientConfig],
    rounds: int,
    *,
    r: int,
    on_round: RoundCallback | None = None,
) -> ExperimentResult:
    if method not in BASELINES:
        raise RangeError(f"unknown baseline: {method}")
    if rounds < 1:
        raise RangeError(f"rounds must be >= 1, got {rounds}")
    if options.topk_ratio is not None and options.topk_ratio < 1:
        raise RangeError("top-k upload compression is only wired into fslora")
    if options.secure:
        raise RangeError("secure aggregation is only wired into fslora")

    rng = RngStream(seed=options.seed)
    state = initial_state(dataset, r, rng)
    base = np.array(state.base.w0)
    zero_pair = AdapterPair(b=np.zeros((dataset.m, r)), a=np.zeros((r, dataset.n)))
    by_id = {c.id: c for c in clients}
    restarted: dict[int, AdapterPair] = {}

    result = ExperimentResult(
        initial_eval_loss=_eval(base, state.adapters, dataset, options.lora_scale),
        base_checksum_start=state.base.checksum(),
    )
    for t in range(rounds):
        t0 = time.perf_counter()
        chosen = select_participants(clients, options.participation, rng, t)
        if method == "fedlora":
            ks = {cid: r for cid in chosen}
        else:
            ks = {cid: by_id[cid].rank_at(t, r) for cid in chosen}
        BaselineKind(tag=method, ks=tuple(ks[c] for c in chosen))  # type: ignore[arg-type]
        denom = resolve_denominator(options.denominator, len(chosen), len(clients))
        ledger = CostLedger()

        starts: dict[int, AdapterPair] = {}
        if method == "flora":
            for cid in chosen:
                prev = restarted.get(cid)
                if prev is not None and prev.rank == ks[cid]:
                    starts[cid] = prev
                else:
                    starts[cid] = init_adapters(dataset.m, dataset.n, ks[cid], rng.child("flora-init", cid, t))
        else:
            ledger.add_downlink(len(encode_wire(state.adapters.b, state.adapters.a)))
            for cid in chosen:
                starts[cid] = state.adapters if method == "fedlora" else truncate(state.adapters, ks[cid])

        locals_: dict[int, AdapterPair] = {}
        losses: list[float] = []
        gb_sum = np.zeros((dataset.m, r))
        ga_sum = np.zeros((r, dataset.n))
        for cid in chosen:
            end, loss, gb0, ga0 = _train(starts[cid], base, by_id[cid], dataset, rng, t, options.lora_scale)
            locals_[cid] = end
            losses.append(loss)
            k = gb0.shape[1]
            gb_sum[:, :k] += gb0
            ga_sum[:k, :] += ga0
            if method == "fedlora":
                ledger.add_uplink(cid, len(encode_wire(end.b - starts[cid].b, end.a - starts[cid].a)))
            else:
                ledger.add_uplink(cid, len(encode_wire(end.b, end.a)))

        pairs = [locals_[cid] for cid in chosen]
        if method == "fedlora":
            g = state.adapters
            tb = np.zeros_like(g.b)
            ta = np.zeros_like(g.a)
            for p in pairs:
                tb += p.b - g.b
                ta += p.a - g.a
            adapters = AdapterPair(b=g.b + tb / denom, a=g.a + ta / denom)
        elif method == "heterolora":
            adapters = heterolora_aggregate(r, pairs, reference=state.adapters, denom=denom)
        elif method == "flexlora":
            adapters = svd_pair(average_product(pairs, denom), r, width=r)
        else:
            b_cat, a_cat = stack_modules(pairs)
            ledger.add_downlink(len(encode_wire(b_cat, a_cat)))
            merged = flora_round([base], pairs, [ks[c] for c in chosen], [rng.child("flora-reinit", c, t) for c in chosen], denom=denom)
            base = np.array(merged.bases[0])
            restarted.update(zip(chosen, merged.adapters))
            adapters = zero_pair

        state = GlobalState(base=FrozenBase(base), adapters=adapters, round=t + 1)
        metrics = RoundMetrics(
            round=t + 1,
            train_loss=float(np.mean(losses)),
            eval_loss=_eval(base, adapters, dataset, options.lora_scale),
            grad_norm=float(np.sqrt(np.sum(gb_sum * gb_sum) + np.sum(ga_sum * ga_sum))) / len(chosen),
            uplink_bytes=ledger.uplink_total,
            downlink_bytes=ledger.downlink,
            participants=len(chosen),
            wall_time_s=time.perf_counter() - t0,
        )
        result.metrics.append(metrics)
        result.ledgers.append(ledger)
        result.best_eval_loss = min(result.best_eval_loss, metrics.eval_loss)
        result.final_state = state
        if on_round is not None:
            on_round(metrics, state)
        if metrics.round % max(1, options.log_every) == 0 or metrics.round == rounds:
            logger.info(
                "%s round %d: train=%.6g eval=%.6g up=%dB down=%dB",
                method,
                metrics.round,
                metrics.train_loss,
                metrics.eval_loss,
                metrics.uplink_bytes,
                metrics.downlink_bytes,
            )
    result.base_checksum_end = state.base.checksum()
    return result
