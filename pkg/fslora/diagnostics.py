from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from fslora.errors import RangeError, ShapeError
from fslora.lora_core import AdapterGrads, AdapterPair, FrozenBase, adapter_grads, effective_weight
from fslora.numerics import RngStream, relative_error
from fslora.sketching import SketchSpec, sample_random_k, second_moment_matrix
from fslora.synth_tasks import Batch, Dataset, Shard, loss_and_weight_grad, sample_batch

logger = logging.getLogger(__name__)


def _stack(grads: AdapterGrads) -> np.ndarray:
    return np.concatenate([grads.gb.ravel(), grads.ga.ravel()])


def _norm(grads: AdapterGrads) -> float:
    return float(np.sqrt(np.sum(grads.gb * grads.gb) + np.sum(grads.ga * grads.ga)))


def sample_states(m: int, n: int, r: int, count: int, rng: RngStream, *, b_stddev: float | None = None) -> list[AdapterPair]:
    """Random adapter states: A ~ N(0, 1/r), B ~ N(0, b_stddev^2) (default 1/m variance)."""
    if count < 1:
        raise RangeError(f"state count must be >= 1, got {count}")
    sb = (1.0 / math.sqrt(m)) if b_stddev is None else b_stddev
    out = []
    for i in range(count):
        gen = rng.child("state", i).generator()
        b = gen.standard_normal((m, r)) * sb
        a = gen.standard_normal((r, n)) / math.sqrt(r)
        out.append(AdapterPair(b=b, a=a))
    return out


def least_squares_moments(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    if batch.kind != "least-squares":
        raise ShapeError("closed-form moments exist only for least-squares batches")
    count = len(batch)
    if count == 0:
        raise RangeError("moments need a non-empty batch")
    x, y = batch.inputs, batch.targets
    return x.T @ x / count, y.T @ x / count


def expected_sketched_grads(base: FrozenBase, ad: AdapterPair, batch: Batch, k: int) -> AdapterGrads:
    """Exact gradient of E_S f(W0 + B S A) for least-squares with random-k sketches.

    grad_B = (W0 Sig - C) A^T + B (Q o (A Sig A^T))
    grad_A = B^T (W0 Sig - C) + (Q o (B^T B)) A Sig
    """
    sig, cross = least_squares_moments(batch)
    q = second_moment_matrix(ad.rank, k)
    g0 = base.w0 @ sig - cross
    gb = g0 @ ad.a.T + ad.b @ (q * (ad.a @ sig @ ad.a.T))
    ga = ad.b.T @ g0 + (q * (ad.b.T @ ad.b)) @ ad.a @ sig
    return AdapterGrads(gb=gb, ga=ga)


def monte_carlo_sketched_grads(
    base: FrozenBase,
    ad: AdapterPair,
    batch: Batch,
    k: int,
    draws: int,
    rng: RngStream,
) -> AdapterGrads:
    if draws < 1:
        raise RangeError(f"draws must be >= 1, got {draws}")
    spec = SketchSpec(r=ad.rank, k=k)
    gen = rng.child("mc-sketch").generator()
    gb = np.zeros_like(ad.b)
    ga = np.zeros_like(ad.a)
    for _ in range(draws):
        s = sample_random_k(spec, gen)
        _, g = loss_and_weight_grad(effective_weight(base, ad, s), batch)
        grads = adapter_grads(g, ad, s)
        gb += grads.gb
        ga += grads.ga
    return AdapterGrads(gb=gb / draws, ga=ga / draws)


def sketched_objective_grads(
    base: FrozenBase,
    ad: AdapterPair,
    batch: Batch,
    k: int,
    rng: RngStream,
    *,
    draws: int = 256,
    exact: bool | None = None,
) -> AdapterGrads:
    if exact is None:
        exact = batch.kind == "least-squares"
    if exact:
        return expected_sketched_grads(base, ad, batch, k)
    return monte_carlo_sketched_grads(base, ad, batch, k, draws, rng)


def _stochastic_grads(
    base: FrozenBase,
    ad: AdapterPair,
    dataset: Dataset,
    shard: Shard,
    spec: SketchSpec,
    batch_size: int,
    gen: np.random.Generator,
) -> AdapterGrads:
    s = sample_random_k(spec, gen)
    batch = dataset.take(sample_batch(shard, batch_size, gen))
    _, g = loss_and_weight_grad(effective_weight(base, ad, s), batch)
    return adapter_grads(g, ad, s)


@dataclass(frozen=True)
class GradNormStats:
    min: float
    max: float
    per_state: tuple[float, ...]


def grad_norm_stats(
    dataset: Dataset,
    shard: Shard,
    states: int | Sequence[AdapterPair],
    samples: int,
    *,
    r: int,
    k: int,
    rng: RngStream,
    batch_size: int = 16,
) -> GradNormStats:
    """Min/max over adapter states of E ||grad l~(X, xi; S)|| over (xi, S) draws."""
    if samples < 1:
        raise RangeError(f"samples per state must be >= 1, got {samples}")
    if isinstance(states, int):
        states = sample_states(dataset.m, dataset.n, r, states, rng.child("grad-norm-states"))
    if not states:
        raise RangeError("grad_norm_stats needs at least one state")
    base = FrozenBase(dataset.w0)
    spec = SketchSpec(r=r, k=k)
    means = []
    for i, ad in enumerate(states):
        gen = rng.child("grad-norm", i).generator()
        total = 0.0
        for _ in range(samples):
            total += _norm(_stochastic_grads(base, ad, dataset, shard, spec, batch_size, gen))
        means.append(total / samples)
    return GradNormStats(min=float(min(means)), max=float(max(means)), per_state=tuple(means))


@dataclass(frozen=True)
class SmoothnessProbe:
    k: int
    r: int
    ratio: float
    sketched_sup: float
    identity_sup: float
    probes: int
    skipped: int

    @property
    def bound(self) -> float:
        return self.r / self.k


def smoothness_ratio_probe(
    dataset: Dataset,
    shard: Shard,
    *,
    r: int,
    k: int,
    probes: int,
    rng: RngStream,
    radius: float = 0.1,
    draws: int = 256,
    exact: bool | None = None,
) -> SmoothnessProbe:
    """sup ||grad f^S(X) - grad f^S(Y)|| / ||X - Y|| over probe pairs, divided by the k = r value.

    Both surfaces are evaluated on the same probe pairs; Monte Carlo sketch draws
    are shared between X and Y of a pair.
    """
    if probes < 1:
        raise RangeError(f"probes must be >= 1, got {probes}")
    if radius < 0:
        raise RangeError(f"radius must be >= 0, got {radius}")
    base = FrozenBase(dataset.w0)
    batch = dataset.take(shard.indices)
    states = sample_states(dataset.m, dataset.n, r, probes, rng.child("smooth-states"))
    sup_s = sup_i = 0.0
    skipped = 0
    for p, x in enumerate(states):
        gen = rng.child("smooth-dir", p).generator()
        db = gen.standard_normal(x.b.shape)
        da = gen.standard_normal(x.a.shape)
        scale = math.sqrt(float(np.sum(db * db) + np.sum(da * da)))
        step = radius / scale if scale > 0 else 0.0
        y = AdapterPair(b=x.b + db * step, a=x.a + da * step)
        dist = math.sqrt(float(np.sum((y.b - x.b) ** 2) + np.sum((y.a - x.a) ** 2)))
        if dist == 0:
            skipped += 1
            logger.warning("smoothness probe %d has zero displacement; skipped", p)
            continue
        stream = rng.child("smooth-mc", p)
        for kk, is_identity in ((k, False), (r, True)):
            gx = sketched_objective_grads(base, x, batch, kk, stream, draws=draws, exact=exact)
            gy = sketched_objective_grads(base, y, batch, kk, stream, draws=draws, exact=exact)
            ratio = float(np.linalg.norm(_stack(gx) - _stack(gy))) / dist
            if is_identity:
                sup_i = max(sup_i, ratio)
            else:
                sup_s = max(sup_s, ratio)
    used = probes - skipped
    value = sup_s / sup_i if sup_i > 0 else (1.0 if sup_s == 0 else math.inf)
    return SmoothnessProbe(k=k, r=r, ratio=value, sketched_sup=sup_s, identity_sup=sup_i, probes=used, skipped=skipped)


def unbiasedness_error(
    dataset: Dataset,
    shard: Shard,
    ad: AdapterPair,
    *,
    k: int,
    draws: int,
    rng: RngStream,
    batch_size: int = 16,
) -> float:
    if draws < 1:
        raise RangeError(f"draws must be >= 1, got {draws}")
    base = FrozenBase(dataset.w0)
    spec = SketchSpec(r=ad.rank, k=k)
    gen = rng.child("unbiased").generator()
    gb = np.zeros_like(ad.b)
    ga = np.zeros_like(ad.a)
    for _ in range(draws):
        g = _stochastic_grads(base, ad, dataset, shard, spec, batch_size, gen)
        gb += g.gb
        ga += g.ga
    exact = expected_sketched_grads(base, ad, dataset.take(shard.indices), k)
    return relative_error(np.concatenate([(gb / draws).ravel(), (ga / draws).ravel()]), _stack(exact))


def fit_nonnegative_affine(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise ShapeError(f"fit needs two equal 1-D samples, got {x.shape} and {y.shape}")
    design = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    if slope < 0:
        return 0.0, max(0.0, float(np.mean(y)))
    if intercept < 0:
        xx = float(x @ x)
        return (max(0.0, float(x @ y) / xx) if xx > 0 else 0.0), 0.0
    return float(slope), float(intercept)


def variance_fit(
    dataset: Dataset,
    shard: Shard,
    states: Sequence[AdapterPair],
    *,
    k: int,
    samples: int,
    rng: RngStream,
    batch_size: int = 16,
    draws: int = 256,
) -> tuple[float, float]:
    """(rho, sigma^2) with E||grad l~ - grad f^S||^2 ~ rho ||grad f^S||^2 + sigma^2 across states."""
    base = FrozenBase(dataset.w0)
    batch = dataset.take(shard.indices)
    spec = SketchSpec(r=states[0].rank, k=k)
    dev, sq = [], []
    for i, ad in enumerate(states):
        mean = _stack(sketched_objective_grads(base, ad, batch, k, rng.child("var-mc", i), draws=draws))
        gen = rng.child("var", i).generator()
        acc = 0.0
        for _ in range(samples):
            d = _stack(_stochastic_grads(base, ad, dataset, shard, spec, batch_size, gen)) - mean
            acc += float(d @ d)
        dev.append(acc / samples)
        sq.append(float(mean @ mean))
    return fit_nonnegative_affine(np.array(sq), np.array(dev))


def dissimilarity_fit(
    dataset: Dataset,
    shards: Sequence[Shard],
    states: Sequence[AdapterPair],
    *,
    k: int,
    rng: RngStream,
    draws: int = 256,
) -> tuple[float, float]:
    """(c_h, delta_h^2) with mean_i ||grad f_i^S - grad f^S||^2 ~ c_h ||grad f^S||^2 + delta_h^2."""
    base = FrozenBase(dataset.w0)
    batches = [dataset.take(s.indices) for s in shards]
    dis, sq = [], []
    for i, ad in enumerate(states):
        per = np.array(
            [_stack(sketched_objective_grads(base, ad, b, k, rng.child("dis-mc", i, c), draws=draws)) for c, b in enumerate(batches)]
        )
        mean = per.mean(axis=0)
        dis.append(float(np.mean(np.sum((per - mean) ** 2, axis=1))))
        sq.append(float(mean @ mean))
    return fit_nonnegative_affine(np.array(sq), np.array(dis))


class GradNormBand(BaseModel):
    client: int
    min: float = Field(ge=0)
    max: float = Field(ge=0)


class SmoothnessRow(BaseModel):
    k: int
    ratio: float = Field(ge=0)
    bound: float = Field(ge=0)
    identity_l: float = Field(ge=0, description="probe estimate of L at k = r")
    scaled_l: float = Field(ge=0, description="L * r / k")
    scaled_l_sq: float = Field(ge=0, description="L * r^2 / k^2")
    probes: int
    skipped: int


class AssumptionEstimates(BaseModel):
    r: int
    k: int
    grad_norms: list[GradNormBand] = Field(default_factory=list)
    rho: float = Field(0.0, ge=0)
    sigma2: float = Field(0.0, ge=0)
    c_h: float = Field(0.0, ge=0)
    delta_h2: float = Field(0.0, ge=0)
    smoothness: list[SmoothnessRow] = Field(default_factory=list)

    @model_validator(mode="after")
    def _finite(self) -> "AssumptionEstimates":
        values = [self.rho, self.sigma2, self.c_h, self.delta_h2]
        values += [v for g in self.grad_norms for v in (g.min, g.max)]
        values += [v for s in self.smoothness for v in (s.ratio, s.identity_l)]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("assumption estimates must be finite")
        return self


def diagnose(
    dataset: Dataset,
    shards: Sequence[Shard],
    *,
    r: int,
    k: int,
    rng: RngStream,
    states: int = 8,
    samples: int = 64,
    probes: int = 8,
    batch_size: int = 16,
    draws: int = 256,
    probe_ks: Sequence[int] | None = None,
) -> AssumptionEstimates:
    if not shards:
        raise RangeError("diagnose needs at least one shard")
    probe_states = sample_states(dataset.m, dataset.n, r, states, rng.child("diag-states"))
    bands = []
    for shard in shards:
        st = grad_norm_stats(
            dataset, shard, probe_states, samples, r=r, k=k, rng=rng.child("diag-norm", shard.owner), batch_size=batch_size
        )
        bands.append(GradNormBand(client=shard.owner, min=st.min, max=st.max))
        logger.debug("client %d: grad norm band [%.4g, %.4g]", shard.owner, st.min, st.max)

    rho, sigma2 = variance_fit(
        dataset, shards[0], probe_states, k=k, samples=samples, rng=rng.child("diag-var"), batch_size=batch_size, draws=draws
    )
    c_h, delta_h2 = dissimilarity_fit(dataset, shards, probe_states, k=k, rng=rng.child("diag-dis"), draws=draws)

    rows = []
    for kk in probe_ks or sorted({max(1, r // 4), max(1, r // 2), r}):
        p = smoothness_ratio_probe(dataset, shards[0], r=r, k=kk, probes=probes, rng=rng.child("diag-smooth", kk), draws=draws)
        rows.append(
            SmoothnessRow(
                k=kk,
                ratio=p.ratio,
                bound=p.bound,
                identity_l=p.identity_sup,
                scaled_l=p.identity_sup * r / kk,
                scaled_l_sq=p.identity_sup * (r / kk) ** 2,
                probes=p.probes,
                skipped=p.skipped,
            )
        )
    est = AssumptionEstimates(r=r, k=k, grad_norms=bands, rho=rho, sigma2=sigma2, c_h=c_h, delta_h2=delta_h2, smoothness=rows)
    logger.info("diagnostics: rho=%.4g sigma2=%.4g c_h=%.4g delta_h2=%.4g", rho, sigma2, c_h, delta_h2)
    return est


def write_report(est: AssumptionEstimates, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(est.model_dump(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def load_report(path: Path) -> AssumptionEstimates | None:
    if not path.exists():
        return None
    try:
        return AssumptionEstimates.model_validate_json(path.read_text(encoding="utf-8"))
    except Exception:
        return None
