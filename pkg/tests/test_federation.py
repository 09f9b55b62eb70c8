import numpy as np
import pytest

from fslora.config import build_experiment, validate_config
from fslora.errors import ProtocolError, RangeError
from fslora.federation import (
    ClientConfig,
    EngineOptions,
    GlobalState,
    RoundMetrics,
    aggregate,
    initial_state,
    plan_round,
    resolve_denominator,
    run_experiment,
    select_participants,
)
from fslora.lora_core import AdapterPair, FrozenBase, SparseDelta, plain_lora_grads, sgd_step, unsketched_weight
from fslora.numerics import RngStream
from fslora.ranks import ConstantRank
from fslora.synth_tasks import Shard, TaskSpec, generate_task, loss_and_weight_grad


def _experiment(**kw):
    data = {
        "rounds": 3,
        "rank": 4,
        "task": {"m": 6, "n": 5, "true_rank": 2, "sample_count": 120, "holdout_count": 20},
        "clients": {"count": 4, "local_steps": 2, "ranks": {"kind": "uniform", "ratio": 0.5}},
    }
    for key, value in kw.items():
        node = data
        parts = key.split("__")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return build_experiment(validate_config(data))


def _clients(n: int) -> list[ClientConfig]:
    return [ClientConfig(id=i, schedule=ConstantRank(1), shard=Shard(owner=i, indices=np.array([i]))) for i in range(n)]


def _state(m: int = 2, n: int = 3, r: int = 4) -> GlobalState:
    return GlobalState(base=FrozenBase(np.zeros((m, n))), adapters=AdapterPair(b=np.zeros((m, r)), a=np.zeros((r, n))))


def test_select_participants_picks_distinct_clients() -> None:
    chosen = select_participants(_clients(20), 10, RngStream(seed=0), round=3)
    assert len(chosen) == 10
    assert len(set(chosen)) == 10
    assert list(chosen) == sorted(chosen)
    assert select_participants(_clients(3), "all", RngStream(seed=0), round=0) == (0, 1, 2)


def test_select_participants_is_uniform_over_rounds() -> None:
    counts = np.zeros(20, dtype=int)
    rng = RngStream(seed=11)
    clients = _clients(20)
    for t in range(10_000):
        counts[list(select_participants(clients, 5, rng, round=t))] += 1
    assert np.all(np.abs(counts - 2500) <= 150)


def test_select_participants_rejects_bad_requests() -> None:
    with pytest.raises(RangeError):
        select_participants(_clients(3), 4, RngStream(seed=0), round=0)
    dup = _clients(2) + _clients(1)
    with pytest.raises(RangeError):
        select_participants(dup, "all", RngStream(seed=0), round=0)


def test_plan_round_draws_one_sketch_per_participant() -> None:
    exp = _experiment()
    state = initial_state(exp.dataset, 4, RngStream(seed=0))
    plan = plan_round(state, exp.clients, 2, RngStream(seed=0))
    assert len(plan.participants) == 2
    assert set(plan.sketches) == set(plan.participants)
    assert all(s.spec.k == 2 for s in plan.sketches.values())


def test_client_config_validates_schedule_and_lr() -> None:
    shard = Shard(owner=0, indices=np.array([0]))
    with pytest.raises(RangeError):
        ClientConfig(id=0, schedule=ConstantRank(1), shard=shard, lr=-0.1)
    cfg = ClientConfig(id=0, schedule=ConstantRank(9), shard=shard)
    with pytest.raises(RangeError):
        cfg.rank_at(0, 8)


def test_aggregate_single_client_adds_delta() -> None:
    state = _state()
    d = SparseDelta(indices=(1, 3), b_cols=np.ones((2, 2)), a_rows=np.full((2, 3), 2.0), rank=4)
    out = aggregate(state, [d])
    assert out.round == 1
    assert np.array_equal(out.adapters.b[:, [1, 3]], np.ones((2, 2)))
    assert np.array_equal(out.adapters.a[[1, 3], :], np.full((2, 3), 2.0))
    assert not np.any(out.adapters.b[:, [0, 2]])


def test_aggregate_disjoint_clients_halves_each_update() -> None:
    state = _state()
    d0 = SparseDelta(indices=(0,), b_cols=np.ones((2, 1)), a_rows=np.ones((1, 3)), rank=4, client_id=0)
    d1 = SparseDelta(indices=(2,), b_cols=np.full((2, 1), 4.0), a_rows=np.ones((1, 3)), rank=4, client_id=1)
    out = aggregate(state, [d1, d0])
    assert np.array_equal(out.adapters.b[:, 0], [0.5, 0.5])
    assert np.array_equal(out.adapters.b[:, 2], [2.0, 2.0])
    total = aggregate(state, [d0, d1], "total-clients", total_clients=4)
    assert np.array_equal(total.adapters.b[:, 2], [1.0, 1.0])


def test_aggregate_rejects_stale_or_empty_rounds() -> None:
    state = _state()
    stale = SparseDelta(indices=(0,), b_cols=np.ones((2, 1)), a_rows=np.ones((1, 3)), rank=4, round=5)
    with pytest.raises(ProtocolError):
        aggregate(state, [stale])
    with pytest.raises(ProtocolError):
        aggregate(state, [])


def test_resolve_denominator_modes() -> None:
    assert resolve_denominator("participant-count", 3, 10) == 3
    assert resolve_denominator("total-clients", 3, 10) == 10
    with pytest.raises(RangeError):
        resolve_denominator("total-clients", 3, None)


def test_single_full_rank_round_is_one_sgd_step() -> None:
    ds = generate_task(TaskSpec(m=5, n=4, true_rank=2, sample_count=40, holdout_count=0, seed=2))
    shard = Shard(owner=0, indices=np.arange(40))
    client = ClientConfig(id=0, schedule=ConstantRank(3), shard=shard, local_steps=1, lr=0.05, batch_size=0)
    opts = EngineOptions(seed=4)
    result = run_experiment(opts, ds, [client], 1, r=3)

    start = initial_state(ds, 3, RngStream(seed=4))
    _, g = loss_and_weight_grad(unsketched_weight(start.base, start.adapters), ds.full())
    expected = sgd_step(start.adapters, plain_lora_grads(g, start.adapters), 0.05)
    got = result.final_state.adapters
    assert np.allclose(got.b, expected.b, atol=1e-14)
    assert np.allclose(got.a, expected.a, atol=1e-14)


def test_run_experiment_keeps_inactive_columns_and_base() -> None:
    exp = _experiment(clients__count=1, clients__ranks={"kind": "uniform", "ratio": 0.25})
    seen: list[tuple[RoundMetrics, GlobalState]] = []
    result = exp.run(on_round=lambda m, s: seen.append((m, s)))
    assert [m.round for m, _ in seen] == [1, 2, 3]
    assert result.base_checksum_start == result.base_checksum_end
    prev = initial_state(exp.dataset, 4, RngStream(seed=0)).adapters
    for plan, (_, state) in zip(result.plans, seen):
        out = plan.sketches[0].complement()
        assert np.array_equal(state.adapters.b[:, out], prev.b[:, out])
        assert np.array_equal(state.adapters.a[out, :], prev.a[out, :])
        prev = state.adapters


def test_run_experiment_is_independent_of_worker_count() -> None:
    one = _experiment(workers=1).run()
    many = _experiment(workers=4).run()
    assert np.array_equal(one.final_state.adapters.b, many.final_state.adapters.b)
    assert np.array_equal(one.final_state.adapters.a, many.final_state.adapters.a)
    assert [m.eval_loss for m in one.metrics] == [m.eval_loss for m in many.metrics]


def test_zero_learning_rate_leaves_adapters_unchanged() -> None:
    exp = _experiment(clients__lr=0.0)
    result = exp.run()
    start = initial_state(exp.dataset, 4, RngStream(seed=0)).adapters
    assert np.array_equal(result.final_state.adapters.b, start.b)
    assert np.array_equal(result.final_state.adapters.a, start.a)


def test_partial_participation_and_importance_sketches() -> None:
    result = _experiment(participation=2, sketch_kind="importance-norm-sum").run()
    assert all(m.participants == 2 for m in result.metrics)
    assert all(len(p.participants) == 2 for p in result.plans)


def test_secure_run_matches_plain_run() -> None:
    plain = _experiment(rounds=4).run()
    secure = _experiment(rounds=4, secure=True).run()
    assert np.allclose(plain.final_state.adapters.b, secure.final_state.adapters.b, atol=1e-10)
    assert np.allclose(plain.final_state.adapters.a, secure.final_state.adapters.a, atol=1e-10)


def test_run_experiment_needs_rounds() -> None:
    exp = _experiment()
    with pytest.raises(RangeError):
        run_experiment(exp.options, exp.dataset, exp.clients, 0, r=4)


def test_secure_aggregation_refuses_top_k_uploads() -> None:
    exp = _experiment(rounds=1, secure=True)
    options = EngineOptions(seed=0, secure=True, topk_ratio=0.5)
    with pytest.raises(RangeError):
        run_experiment(options, exp.dataset, exp.clients, 1, r=exp.r)


def test_secure_uplink_bytes_match_plain_sparse_payloads() -> None:
    plain = _experiment(rounds=2).run()
    secure = _experiment(rounds=2, secure=True).run()
    assert [m.uplink_bytes for m in plain.metrics] == [m.uplink_bytes for m in secure.metrics]
    assert [l.uplink for l in plain.ledgers] == [l.uplink for l in secure.ledgers]
