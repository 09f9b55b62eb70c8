from itertools import combinations

import numpy as np
import pytest

from fslora.diagnostics import (
    AssumptionEstimates,
    diagnose,
    expected_sketched_grads,
    fit_nonnegative_affine,
    grad_norm_stats,
    load_report,
    monte_carlo_sketched_grads,
    sample_states,
    smoothness_ratio_probe,
    unbiasedness_error,
    write_report,
)
from fslora.errors import RangeError, ShapeError
from fslora.lora_core import FrozenBase, adapter_grads, effective_weight
from fslora.numerics import RngStream
from fslora.sketching import Sketch, SketchSpec, identity_sketch
from fslora.synth_tasks import Shard, TaskSpec, generate_task, iid_partition, loss_and_weight_grad


def _task(kind: str = "least-squares", m: int = 5, n: int = 4, count: int = 60):
    ds = generate_task(TaskSpec(kind=kind, m=m, n=n, true_rank=2, sample_count=count, holdout_count=0, seed=7))
    return ds, Shard(owner=0, indices=np.arange(count))


def test_expected_grads_equal_the_average_over_every_sketch() -> None:
    ds, shard = _task()
    base = FrozenBase(ds.w0)
    ad = sample_states(5, 4, 4, 1, RngStream(seed=1))[0]
    batch = ds.full()
    spec = SketchSpec(r=4, k=2)
    gb = np.zeros_like(ad.b)
    ga = np.zeros_like(ad.a)
    subsets = list(combinations(range(4), 2))
    for idx in subsets:
        s = Sketch(spec=spec, indices=idx)
        _, g = loss_and_weight_grad(effective_weight(base, ad, s), batch)
        grads = adapter_grads(g, ad, s)
        gb += grads.gb
        ga += grads.ga
    exact = expected_sketched_grads(base, ad, batch, 2)
    assert np.allclose(exact.gb, gb / len(subsets), atol=1e-10)
    assert np.allclose(exact.ga, ga / len(subsets), atol=1e-10)


def test_expected_grads_at_full_rank_are_plain_grads() -> None:
    ds, _ = _task()
    base = FrozenBase(ds.w0)
    ad = sample_states(5, 4, 3, 1, RngStream(seed=2))[0]
    s = identity_sketch(3)
    _, g = loss_and_weight_grad(effective_weight(base, ad, s), ds.full())
    plain = adapter_grads(g, ad, s)
    exact = expected_sketched_grads(base, ad, ds.full(), 3)
    assert np.allclose(exact.gb, plain.gb, atol=1e-12)
    assert np.allclose(exact.ga, plain.ga, atol=1e-12)


def test_monte_carlo_grads_approach_the_closed_form() -> None:
    ds, _ = _task()
    base = FrozenBase(ds.w0)
    ad = sample_states(5, 4, 4, 1, RngStream(seed=3))[0]
    mc = monte_carlo_sketched_grads(base, ad, ds.full(), 2, 4000, RngStream(seed=3))
    exact = expected_sketched_grads(base, ad, ds.full(), 2)
    err = np.linalg.norm(mc.gb - exact.gb) / np.linalg.norm(exact.gb)
    assert err < 0.1


def test_closed_form_needs_least_squares() -> None:
    ds, _ = _task(kind="multinomial-logistic")
    ad = sample_states(5, 4, 2, 1, RngStream(seed=0))[0]
    with pytest.raises(ShapeError):
        expected_sketched_grads(FrozenBase(ds.w0), ad, ds.full(), 1)


def test_smoothness_ratio_is_one_at_full_rank_and_bounded_below() -> None:
    ds, shard = _task(m=6, n=6, count=80)
    full = smoothness_ratio_probe(ds, shard, r=4, k=4, probes=4, rng=RngStream(seed=0))
    assert full.ratio == pytest.approx(1.0)
    assert full.bound == 1.0
    for k in (1, 2):
        p = smoothness_ratio_probe(ds, shard, r=4, k=k, probes=6, rng=RngStream(seed=k))
        assert p.ratio <= (4 / k) * 1.10
        assert p.probes == 6 and p.skipped == 0


def test_smoothness_probe_skips_zero_displacements() -> None:
    ds, shard = _task()
    p = smoothness_ratio_probe(ds, shard, r=2, k=1, probes=3, rng=RngStream(seed=0), radius=0.0)
    assert p.skipped == 3
    assert p.probes == 0
    assert p.ratio == 1.0
    with pytest.raises(RangeError):
        smoothness_ratio_probe(ds, shard, r=2, k=1, probes=0, rng=RngStream(seed=0))


def test_grad_norm_stats_band_is_ordered() -> None:
    ds, shard = _task()
    st = grad_norm_stats(ds, shard, 3, 8, r=4, k=2, rng=RngStream(seed=0))
    assert 0 <= st.min <= st.max
    assert len(st.per_state) == 3
    with pytest.raises(RangeError):
        grad_norm_stats(ds, shard, 3, 0, r=4, k=2, rng=RngStream(seed=0))


def test_stochastic_sketched_gradient_is_unbiased() -> None:
    ds, shard = _task(count=40)
    ad = sample_states(5, 4, 4, 1, RngStream(seed=4))[0]
    err = unbiasedness_error(ds, shard, ad, k=2, draws=20_000, rng=RngStream(seed=4))
    assert err < 0.05


def test_fit_nonnegative_affine() -> None:
    x = np.array([0.0, 1.0, 2.0, 3.0])
    assert fit_nonnegative_affine(x, 2 * x + 1) == pytest.approx((2.0, 1.0))
    slope, intercept = fit_nonnegative_affine(x, -x + 5)
    assert slope == 0.0 and intercept == pytest.approx(3.5)
    slope, intercept = fit_nonnegative_affine(x, 2 * x - 1)
    assert intercept == 0.0 and slope > 0
    with pytest.raises(ShapeError):
        fit_nonnegative_affine(x, x[:2])


def test_diagnose_and_report_round_trip(tmp_path) -> None:
    ds = generate_task(TaskSpec(m=5, n=4, true_rank=2, sample_count=90, holdout_count=0, seed=1))
    shards = iid_partition(ds, 3, RngStream(seed=0))
    est = diagnose(ds, shards, r=4, k=2, rng=RngStream(seed=0), states=3, samples=6, probes=3)
    assert [b.client for b in est.grad_norms] == [0, 1, 2]
    assert [row.k for row in est.smoothness] == [1, 2, 4]
    assert est.rho >= 0 and est.c_h >= 0
    path = tmp_path / "diag.json"
    write_report(est, path)
    assert load_report(path) == est


def test_load_report_is_tolerant(tmp_path) -> None:
    assert load_report(tmp_path / "missing.json") is None
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert load_report(bad) is None


def test_estimates_must_be_finite() -> None:
    with pytest.raises(ValueError):
        AssumptionEstimates(r=4, k=2, rho=float("inf"))
