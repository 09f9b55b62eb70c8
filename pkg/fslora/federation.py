from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from fslora.costs import CostLedger, encode_wire
from fslora.errors import DegenerateScoresError, NumericalError, ProtocolError, RangeError, ShapeError
from fslora.lora_core import (
    AdapterGrads,
    AdapterPair,
    FrozenBase,
    SparseDelta,
    adapter_grads,
    effective_weight,
    extract_delta,
    init_adapters,
    sgd_step,
    unsketched_weight,
)
from fslora.numerics import RngStream
from fslora.ranks import RankSchedule
from fslora.sketching import Sketch, SketchSpec, encode_indices, pack_bits, sample_importance, sample_random_k
from fslora.synth_tasks import Dataset, Shard, loss_and_weight_grad, sample_batch

logger = logging.getLogger(__name__)

Denominator = Literal["participant-count", "total-clients"]
SketchKind = Literal["random-k", "importance-norm-product", "importance-norm-sum"]


@dataclass(frozen=True)
class ClientConfig:
    id: int
    schedule: RankSchedule
    shard: Shard
    local_steps: int = 10
    lr: float = 0.005
    batch_size: int = 16

    def __post_init__(self) -> None:
        if self.local_steps < 1:
            raise RangeError(f"client {self.id}: local steps must be >= 1, got {self.local_steps}")
        if self.lr < 0:
            raise RangeError(f"client {self.id}: learning rate must be >= 0, got {self.lr}")

    def rank_at(self, round: int, r: int) -> int:
        k = int(self.schedule(round))
        if k < 1 or k > r:
            raise RangeError(f"client {self.id}: scheduled rank {k} at round {round} outside [1, {r}]")
        return k


@dataclass(frozen=True)
class GlobalState:
    base: FrozenBase
    adapters: AdapterPair
    round: int = 0

    @property
    def rank(self) -> int:
        return self.adapters.rank


@dataclass(frozen=True)
class RoundPlan:
    round: int
    participants: tuple[int, ...]
    sketches: dict[int, Sketch]


@dataclass(frozen=True)
class LocalResult:
    delta: SparseDelta
    train_loss: float
    first_grad_b: np.ndarray
    first_grad_a: np.ndarray


@dataclass(frozen=True)
class EngineOptions:
    seed: int = 0
    participation: int | Literal["all"] = "all"
    denominator: Denominator = "participant-count"
    sketch_kind: SketchKind = "random-k"
    topk_ratio: float | None = None
    secure: bool = False
    mask_stddev: float = 1.0
    lora_scale: float = 1.0
    workers: int = 1
    log_every: int = 10


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    train_loss: float
    eval_loss: float
    grad_norm: float
    uplink_bytes: int
    downlink_bytes: int
    participants: int
    wall_time_s: float = 0.0

    # Columns written to metrics CSV; wall time stays out so replays match byte for byte.
    CSV_FIELDS = ("round", "train_loss", "eval_loss", "grad_norm", "uplink_bytes", "downlink_bytes", "participants")

    def csv_row(self) -> dict:
        return {
            "round": self.round,
            "train_loss": repr(float(self.train_loss)),
            "eval_loss": repr(float(self.eval_loss)),
            "grad_norm": repr(float(self.grad_norm)),
            "uplink_bytes": self.uplink_bytes,
            "downlink_bytes": self.downlink_bytes,
            "participants": self.participants,
        }


@dataclass
class ExperimentResult:
    metrics: list[RoundMetrics] = field(default_factory=list)
    final_state: GlobalState | None = None
    initial_eval_loss: float = float("nan")
    best_eval_loss: float = float("inf")
    base_checksum_start: str = ""
    base_checksum_end: str = ""
    ledgers: list[CostLedger] = field(default_factory=list)
    plans: list[RoundPlan] = field(default_factory=list)


RoundCallback = Callable[[RoundMetrics, GlobalState], None]


def initial_state(dataset: Dataset, r: int, rng: RngStream) -> GlobalState:
    ad = init_adapters(dataset.m, dataset.n, r, rng.child("init-adapters"))
    return GlobalState(base=FrozenBase(dataset.w0), adapters=ad, round=0)


def _sample_sketch(state: GlobalState, k: int, kind: SketchKind, stream: RngStream) -> Sketch:
    spec = SketchSpec(r=state.rank, k=k)
    if kind == "random-k":
        return sample_random_k(spec, stream)
    metric = "norm-product" if kind == "importance-norm-product" else "norm-sum"
    try:
        return sample_importance(state.adapters.b, state.adapters.a, k, metric, stream)
    except DegenerateScoresError:
        logger.warning("round %d: importance scores degenerate, sampling uniformly", state.round)
        return sample_random_k(spec, stream.child("fallback"))


def select_participants(
    clients: Sequence[ClientConfig],
    participation: int | Literal["all"],
    rng: RngStream,
    round: int,
) -> tuple[int, ...]:
    ids = sorted(c.id for c in clients)
    if len(set(ids)) != len(ids):
        raise RangeError(f"client ids must be unique: {ids}")
    if participation == "all":
        return tuple(ids)
    p = int(participation)
    if p < 1:
        raise RangeError(f"participation must be >= 1, got {p}")
    if p > len(ids):
        raise RangeError(f"participation {p} exceeds {len(ids)} clients")
    gen = rng.child("plan", round).generator()
    return tuple(sorted(int(c) for c in gen.permutation(np.array(ids))[:p]))


def plan_round(
    state: GlobalState,
    clients: Sequence[ClientConfig],
    participation: int | Literal["all"],
    rng: RngStream,
    *,
    sketch_kind: SketchKind = "random-k",
) -> RoundPlan:
    """Pick this round's participants and draw one sketch for each."""
    chosen = select_participants(clients, participation, rng, state.round)
    by_id = {c.id: c for c in clients}
    sketches = {
        cid: _sample_sketch(state, by_id[cid].rank_at(state.round, state.rank), sketch_kind, rng.child("sketch", state.round, cid))
        for cid in chosen
    }
    return RoundPlan(round=state.round, participants=chosen, sketches=sketches)


def run_local_steps(
    start: AdapterPair,
    cfg: ClientConfig,
    dataset: Dataset,
    rng: RngStream,
    *,
    round: int,
    grad_fn: Callable[[np.ndarray, AdapterPair], tuple[np.ndarray, np.ndarray]],
    weight_fn: Callable[[AdapterPair], np.ndarray],
) -> tuple[AdapterPair, float, np.ndarray, np.ndarray]:
    """H mini-batch SGD steps shared by FSLoRA and the baselines.

    `weight_fn` maps adapters to the weight the loss sees, `grad_fn` maps the
    weight gradient to adapter gradients. Batches come from the
    (client, round) stream, so every method sees the same batches.
    """
    gen = rng.child("batch", cfg.id, round).generator()
    ad = start
    losses: list[float] = []
    first_b = first_a = None
    for step in range(cfg.local_steps):
        batch = dataset.take(sample_batch(cfg.shard, cfg.batch_size, gen))
        loss, g = loss_and_weight_grad(weight_fn(ad), batch)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise NumericalError(f"client {cfg.id} diverged", round=round, step=step)
        gb, ga = grad_fn(g, ad)
        if first_b is None:
            first_b, first_a = gb, ga
        losses.append(loss)
        if cfg.lr > 0:
            try:
                ad = sgd_step(ad, AdapterGrads(gb=gb, ga=ga), cfg.lr)
            except NumericalError as e:
                raise NumericalError(f"client {cfg.id} diverged", round=round, step=step) from e
    return ad, float(np.mean(losses)), first_b, first_a  # type: ignore[return-value]


def local_round(
    snapshot: GlobalState,
    cfg: ClientConfig,
    sketch: Sketch,
    rng: RngStream,
    dataset: Dataset,
    *,
    lora_scale: float = 1.0,
) -> LocalResult:
    """H sketched SGD steps from the broadcast snapshot; one sketch for the whole round."""
    if sketch.spec.r != snapshot.rank:
        raise ShapeError(f"sketch over r={sketch.spec.r} does not match global rank {snapshot.rank}")
    base = snapshot.base

    def weight_fn(ad: AdapterPair) -> np.ndarray:
        return effective_weight(base, ad, sketch, lora_scale=lora_scale)

    def grad_fn(g: np.ndarray, ad: AdapterPair) -> tuple[np.ndarray, np.ndarray]:
        grads = adapter_grads(g, ad, sketch, lora_scale=lora_scale)
        return grads.gb, grads.ga

    end, loss, gb0, ga0 = run_local_steps(
        snapshot.adapters, cfg, dataset, rng, round=snapshot.round, grad_fn=grad_fn, weight_fn=weight_fn
    )
    delta = extract_delta(snapshot.adapters, end, sketch, client_id=cfg.id, round=snapshot.round)
    return LocalResult(delta=delta, train_loss=loss, first_grad_b=gb0, first_grad_a=ga0)


def resolve_denominator(mode: Denominator, participants: int, total_clients: int | None) -> int:
    if mode == "participant-count":
        return participants
    if mode == "total-clients":
        if not total_clients:
            raise RangeError("total-clients denominator needs the client count")
        return total_clients
    raise RangeError(f"unknown denominator mode: {mode}")


def apply_update(state: GlobalState, total: AdapterPair, denom: int) -> GlobalState:
    b = state.adapters.b + total.b / denom
    a = state.adapters.a + total.a / denom
    return GlobalState(base=state.base, adapters=AdapterPair(b=b, a=a), round=state.round + 1)


def sum_deltas(deltas: Sequence[SparseDelta], m: int, n: int, r: int) -> AdapterPair:
    b = np.zeros((m, r))
    a = np.zeros((r, n))
    for d in sorted(deltas, key=lambda x: x.client_id):
        idx = np.array(d.indices, dtype=np.intp)
        b[:, idx] += d.b_cols
        a[idx, :] += d.a_rows
    return AdapterPair(b=b, a=a)


def _check_round(state: GlobalState, deltas: Sequence[SparseDelta]) -> None:
    rounds = sorted({d.round for d in deltas})
    if rounds and rounds != [state.round]:
        raise ProtocolError(f"aggregating round {state.round} with deltas from rounds {rounds}")
    ranks = sorted({d.rank for d in deltas})
    if ranks and ranks != [state.rank]:
        raise ProtocolError(f"delta ranks {ranks} do not match global rank {state.rank}")


def aggregate(
    state: GlobalState,
    deltas: Sequence[SparseDelta],
    denominator: Denominator = "participant-count",
    *,
    total_clients: int | None = None,
) -> GlobalState:
    """[B; A] += (1/N) sum densify(delta_i), reduced in ascending client id."""
    if not deltas:
        raise ProtocolError(f"round {state.round}: nothing to aggregate")
    _check_round(state, deltas)
    total = sum_deltas(deltas, state.adapters.m, state.adapters.n, state.rank)
    return apply_update(state, total, resolve_denominator(denominator, len(deltas), total_clients))


def aggregate_secure(
    state: GlobalState,
    masked: Sequence[SparseDelta],
    participants: Sequence[int],
    denominator: Denominator = "participant-count",
    *,
    total_clients: int | None = None,
) -> GlobalState:
    from fslora.secure_agg import secure_aggregate

    _check_round(state, masked)
    total = secure_aggregate(masked, participants)
    return apply_update(state, total, resolve_denominator(denominator, len(masked), total_clients))


def eval_loss(state: GlobalState, dataset: Dataset, *, lora_scale: float = 1.0) -> float:
    loss, _ = loss_and_weight_grad(unsketched_weight(state.base, state.adapters, lora_scale=lora_scale), dataset.eval_batch())
    return loss


def _map_clients(fn: Callable[[int], LocalResult], ids: Sequence[int], workers: int) -> list[LocalResult]:
    if workers <= 1 or len(ids) <= 1:
        return [fn(cid) for cid in ids]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, ids))


def run_round(
    state: GlobalState,
    clients: Sequence[ClientConfig],
    dataset: Dataset,
    rng: RngStream,
    options: EngineOptions,
) -> tuple[GlobalState, RoundMetrics, CostLedger, RoundPlan]:
    from fslora.baselines import encode_topk_payload, topk_compress

    if options.secure and options.topk_ratio is not None and options.topk_ratio < 1:
        # Masks fill the positions top-k dropped, so the upload would no longer be sparse.
        raise RangeError("secure aggregation cannot be combined with top-k upload compression")
    t0 = time.perf_counter()
    plan = plan_round(state, clients, options.participation, rng, sketch_kind=options.sketch_kind)
    by_id = {c.id: c for c in clients}
    ledger = CostLedger()

    # Broadcast: global pair once, plus each participant's index bitmap.
    ledger.add_downlink(len(encode_wire(state.adapters.b, state.adapters.a)))
    for cid in plan.participants:
        ledger.add_downlink(len(pack_bits(encode_indices(plan.sketches[cid]))))

    snapshot = state

    def work(cid: int) -> LocalResult:
        return local_round(snapshot, by_id[cid], plan.sketches[cid], rng, dataset, lora_scale=options.lora_scale)

    results = _map_clients(work, plan.participants, options.workers)

    deltas: list[SparseDelta] = []
    for res in results:
        delta = res.delta
        if options.topk_ratio is not None and options.topk_ratio < 1:
            ledger.add_uplink(delta.client_id, len(encode_topk_payload(delta, options.topk_ratio)))
            delta = topk_compress(delta, options.topk_ratio)
        else:
            ledger.add_uplink(delta.client_id, len(encode_wire(delta.b_cols, delta.a_rows)))
        deltas.append(delta)

    if options.secure:
        from fslora.secure_agg import derive_masks, mask_delta, provision_pair_seeds

        seeds = provision_pair_seeds(plan.participants, rng.child("secagg", state.round))
        masks = derive_masks(
            plan.sketches, seeds, round=state.round, m=state.adapters.m, n=state.adapters.n, stddev=options.mask_stddev
        )
        masked = [mask_delta(d, masks[d.client_id]) for d in deltas]
        new_state = aggregate_secure(state, masked, plan.participants, options.denominator, total_clients=len(clients))
    else:
        new_state = aggregate(state, deltas, options.denominator, total_clients=len(clients))

    gb = np.zeros_like(state.adapters.b)
    ga = np.zeros_like(state.adapters.a)
    for res in results:
        gb += res.first_grad_b
        ga += res.first_grad_a
    grad_norm = float(np.sqrt(np.sum(gb * gb) + np.sum(ga * ga))) / len(results)

    metrics = RoundMetrics(
        round=new_state.round,
        train_loss=float(np.mean([res.train_loss for res in results])),
        eval_loss=eval_loss(new_state, dataset, lora_scale=options.lora_scale),
        grad_norm=grad_norm,
        uplink_bytes=ledger.uplink_total,
        downlink_bytes=ledger.downlink,
        participants=len(plan.participants),
        wall_time_s=time.perf_counter() - t0,
    )
    return new_state, metrics, ledger, plan


def run_experiment(
    options: EngineOptions,
    dataset: Dataset,
    clients: Sequence[ClientConfig],
    rounds: int,
    *,
    r: int,
    state: GlobalState | None = None,
    on_round: RoundCallback | None = None,
) -> ExperimentResult:
    """Algorithm loop: plan, broadcast, local rounds, aggregate; T times.

    `on_round` sees every completed round before the next starts, so a
    failure mid-run leaves all finished rounds with the caller.
    """
    if rounds < 1:
        raise RangeError(f"rounds must be >= 1, got {rounds}")
    rng = RngStream(seed=options.seed)
    state = state or initial_state(dataset, r, rng)
    if state.adapters.m != dataset.m or state.adapters.n != dataset.n:
        raise ShapeError(f"adapters {state.adapters.m}x{state.adapters.n} do not fit task {dataset.m}x{dataset.n}")

    result = ExperimentResult(
        initial_eval_loss=eval_loss(state, dataset, lora_scale=options.lora_scale),
        base_checksum_start=state.base.checksum(),
    )
    for _ in range(rounds):
        state, metrics, ledger, plan = run_round(state, clients, dataset, rng, options)
        result.metrics.append(metrics)
        result.ledgers.append(ledger)
        result.plans.append(plan)
        result.best_eval_loss = min(result.best_eval_loss, metrics.eval_loss)
        result.final_state = state
        if on_round is not None:
            on_round(metrics, state)
        if metrics.round % max(1, options.log_every) == 0 or metrics.round == rounds:
            logger.info(
                "round %d: train=%.6g eval=%.6g grad=%.4g up=%dB down=%dB",
                metrics.round,
                metrics.train_loss,
                metrics.eval_loss,
                metrics.grad_norm,
                metrics.uplink_bytes,
                metrics.downlink_bytes,
            )
    result.base_checksum_end = state.base.checksum()
    return result
