import numpy as np
import pytest

from fslora.errors import InfeasiblePartitionError, RangeError, ShapeError
from fslora.lora_core import AdapterPair, FrozenBase, init_adapters, plain_lora_grads, sgd_step, unsketched_weight
from fslora.numerics import RngStream
from fslora.synth_tasks import (
    Batch,
    Shard,
    TaskSpec,
    dirichlet_partition,
    generate_task,
    iid_partition,
    load_dataset,
    loss_and_weight_grad,
    sample_batch,
    save_dataset,
)


def _check_cover(shards: list[Shard], total: int) -> None:
    joined = np.concatenate([s.indices for s in shards])
    assert sorted(joined.tolist()) == list(range(total))
    assert all(len(s) >= 1 for s in shards)


def test_generate_task_is_seeded_and_realizable() -> None:
    spec = TaskSpec(m=6, n=5, true_rank=2, sample_count=50, holdout_count=10, seed=3)
    d1 = generate_task(spec)
    d2 = generate_task(spec)
    assert np.array_equal(d1.inputs, d2.inputs)
    assert np.linalg.matrix_rank(d1.w_star - d1.w0) == 2
    loss, g = loss_and_weight_grad(d1.w_star, d1.full())
    assert loss == pytest.approx(0.0, abs=1e-20)
    assert np.allclose(g, 0.0)
    assert len(d1.eval_batch()) == 10


def test_task_spec_rejects_oversized_rank() -> None:
    with pytest.raises(ValueError):
        TaskSpec(m=3, n=4, true_rank=4)


def test_least_squares_gradient_matches_finite_difference() -> None:
    gen = np.random.default_rng(0)
    batch = Batch(kind="least-squares", inputs=gen.standard_normal((7, 3)), targets=gen.standard_normal((7, 2)))
    w = gen.standard_normal((2, 3))
    _, g = loss_and_weight_grad(w, batch)
    h = 1e-6
    num = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        p, q = w.copy(), w.copy()
        p[idx] += h
        q[idx] -= h
        num[idx] = (loss_and_weight_grad(p, batch)[0] - loss_and_weight_grad(q, batch)[0]) / (2 * h)
    assert np.allclose(g, num, atol=1e-6)


def test_logistic_gradient_matches_finite_difference() -> None:
    spec = TaskSpec(kind="multinomial-logistic", m=4, n=3, true_rank=1, sample_count=20, holdout_count=0, seed=1)
    ds = generate_task(spec)
    w = ds.w0
    _, g = loss_and_weight_grad(w, ds.full())
    h = 1e-6
    num = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        p, q = np.array(w), np.array(w)
        p[idx] += h
        q[idx] -= h
        num[idx] = (loss_and_weight_grad(p, ds.full())[0] - loss_and_weight_grad(q, ds.full())[0]) / (2 * h)
    assert np.allclose(g, num, atol=1e-6)
    assert set(ds.labels().tolist()) <= set(range(4))


def test_loss_rejects_empty_and_misshapen_batches() -> None:
    empty = Batch(kind="least-squares", inputs=np.zeros((0, 3)), targets=np.zeros((0, 2)))
    with pytest.raises(RangeError):
        loss_and_weight_grad(np.zeros((2, 3)), empty)
    batch = Batch(kind="least-squares", inputs=np.zeros((2, 4)), targets=np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        loss_and_weight_grad(np.zeros((2, 3)), batch)


def test_full_rank_adapters_drive_least_squares_loss_to_zero() -> None:
    ds = generate_task(TaskSpec(m=6, n=6, true_rank=2, sample_count=200, holdout_count=0, seed=5))
    base = FrozenBase(ds.w0)
    ad = init_adapters(6, 6, 4, RngStream(seed=5))
    batch = ds.full()
    for _ in range(20000):
        _, g = loss_and_weight_grad(unsketched_weight(base, ad), batch)
        ad = sgd_step(ad, plain_lora_grads(g, ad), 0.1)
    loss, _ = loss_and_weight_grad(unsketched_weight(base, ad), batch)
    assert loss < 1e-6


def test_sample_batch_stays_inside_shard() -> None:
    shard = Shard(owner=0, indices=np.array([3, 7, 9]))
    picks = sample_batch(shard, 50, np.random.default_rng(0))
    assert set(picks.tolist()) <= {3, 7, 9}
    assert np.array_equal(sample_batch(shard, 0, np.random.default_rng(0)), shard.indices)


def test_iid_partition_is_balanced_and_complete() -> None:
    ds = generate_task(TaskSpec(m=3, n=3, true_rank=1, sample_count=103, holdout_count=0))
    shards = iid_partition(ds, 10, RngStream(seed=1))
    _check_cover(shards, 103)
    assert {len(s) for s in shards} <= {10, 11}
    with pytest.raises(InfeasiblePartitionError):
        iid_partition(ds, 104, RngStream(seed=1))


@pytest.mark.parametrize("kind", ["least-squares", "multinomial-logistic"])
@pytest.mark.parametrize("alpha", [0.05, 0.5, 10.0])
def test_dirichlet_partition_is_disjoint_and_complete(kind: str, alpha: float) -> None:
    ds = generate_task(TaskSpec(kind=kind, m=4, n=3, true_rank=1, sample_count=300, holdout_count=0, seed=2))
    for seed in range(5):
        _check_cover(dirichlet_partition(ds, 8, alpha, RngStream(seed=seed)), 300)


def test_dirichlet_partition_single_client_and_errors() -> None:
    ds = generate_task(TaskSpec(m=3, n=3, true_rank=1, sample_count=20, holdout_count=0))
    one = dirichlet_partition(ds, 1, 0.5, RngStream(seed=0))
    assert len(one) == 1 and len(one[0]) == 20
    with pytest.raises(RangeError):
        dirichlet_partition(ds, 2, 0.0, RngStream(seed=0))
    with pytest.raises(InfeasiblePartitionError):
        dirichlet_partition(ds, 21, 0.5, RngStream(seed=0))


def test_dirichlet_large_alpha_is_near_uniform() -> None:
    ds = generate_task(TaskSpec(m=3, n=3, true_rank=1, sample_count=10_000, holdout_count=0))
    sizes = [len(s) for s in dirichlet_partition(ds, 10, 1000.0, RngStream(seed=0))]
    assert all(900 <= s <= 1100 for s in sizes)


def test_dirichlet_small_alpha_is_skewed() -> None:
    ds = generate_task(TaskSpec(m=3, n=3, true_rank=1, sample_count=2000, holdout_count=0))
    skewed = 0
    for seed in range(100):
        sizes = [len(s) for s in dirichlet_partition(ds, 10, 0.1, RngStream(seed=seed))]
        if max(sizes) / 2000 >= 0.25:
            skewed += 1
    assert skewed >= 50


def test_dataset_binary_round_trip(tmp_path) -> None:
    for kind in ("least-squares", "multinomial-logistic"):
        ds = generate_task(TaskSpec(kind=kind, m=4, n=3, true_rank=1, sample_count=30, holdout_count=5))
        path = tmp_path / f"{kind}.fsld"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.kind == ds.kind
        assert np.array_equal(back.inputs, ds.inputs)
        assert np.array_equal(back.targets, ds.targets)
        assert np.array_equal(back.w_star, ds.w_star)
        assert np.array_equal(back.eval_batch().inputs, ds.eval_batch().inputs)


def test_load_dataset_rejects_foreign_files(tmp_path) -> None:
    path = tmp_path / "bad.fsld"
    path.write_bytes(b"NOPE" + b"\x00" * 60)
    with pytest.raises(ShapeError):
        load_dataset(path)
