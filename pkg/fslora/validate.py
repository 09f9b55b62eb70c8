from __future__ import annotations

import logging
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from fslora import lora_core
from fslora.baselines import flexlora_aggregate, flora_round, run_baseline, stack_modules
from fslora.config import ExperimentConfig, build_experiment, validate_config
from fslora.costs import CostParams, bitmap_bytes, reconcile, topk_kept
from fslora.diagnostics import sample_states, smoothness_ratio_probe, unbiasedness_error
from fslora.federation import ExperimentResult, GlobalState, RoundMetrics, run_experiment, sum_deltas
from fslora.lora_core import AdapterPair, FrozenBase, SparseDelta, densify, effective_weight, extract_delta
from fslora.numerics import RngStream, relative_error
from fslora.runner import THRESHOLD_FRACTION, TOPK_LOSS_FACTOR, execute_run
from fslora.secure_agg import derive_masks, mask_delta, provision_pair_seeds, secure_aggregate
from fslora.settings import Settings
from fslora.sketching import SketchSpec, apply_left, apply_right, sample_random_k
from fslora.synth_tasks import Batch, Shard, TaskSpec, generate_task, loss_and_weight_grad

logger = logging.getLogger(__name__)

TRENDS_SEEDS = 10
RATIO_GRID = (0.125, 0.25, 0.5, 1.0)
LOCAL_STEPS_GRID = (1, 5, 20)


@dataclass(frozen=True)
class CheckResult:
    name: str
    group: str
    ok: bool
    detail: str
    seconds: float = 0.0


CheckFn = Callable[[], tuple[bool, str]]
_REGISTRY: list[tuple[str, str, CheckFn]] = []


def check(group: str, name: str) -> Callable[[CheckFn], CheckFn]:
    def deco(fn: CheckFn) -> CheckFn:
        _REGISTRY.append((group, name, fn))
        return fn

    return deco


def groups() -> list[str]:
    return sorted({g for g, _, _ in _REGISTRY})


def standard_config(**updates) -> ExperimentConfig:
    """N=10, m=n=32, r=16, H=10, T=200 least squares."""
    data = {
        "rounds": 200,
        "rank": 16,
        "task": {"kind": "least-squares", "m": 32, "n": 32, "true_rank": 4, "sample_count": 4000, "holdout_count": 512},
        "clients": {"count": 10, "local_steps": 10, "lr": 0.005, "batch_size": 16},
    }
    cfg = validate_config(data)
    return cfg.model_copy(update=updates, deep=True) if updates else cfg


def _with(cfg: ExperimentConfig, **paths) -> ExperimentConfig:
    data = cfg.model_dump(mode="json")
    for path, value in paths.items():
        node = data
        parts = path.split("__")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return validate_config(data)


def _run(cfg: ExperimentConfig) -> ExperimentResult:
    return build_experiment(cfg, Settings.load()).run()


# ---- lora ----


def finite_difference_error(m: int, n: int, r: int, k: int, seed: int, step: float = 1e-6) -> float:
    """Relative error between adapter_grads and central differences of f(W0 + B S A)."""
    gen = np.random.default_rng(seed)
    base = FrozenBase(gen.standard_normal((m, n)) / math.sqrt(n))
    ad = AdapterPair(b=gen.standard_normal((m, r)), a=gen.standard_normal((r, n)))
    batch = Batch(kind="least-squares", inputs=gen.standard_normal((6, n)), targets=gen.standard_normal((6, m)))
    s = sample_random_k(SketchSpec(r=r, k=k), gen)

    def loss(b: np.ndarray, a: np.ndarray) -> float:
        return loss_and_weight_grad(effective_weight(base, AdapterPair(b=b, a=a), s), batch)[0]

    _, g = loss_and_weight_grad(effective_weight(base, ad, s), batch)
    grads = lora_core.adapter_grads(g, ad, s)
    num_b = np.zeros_like(ad.b)
    num_a = np.zeros_like(ad.a)
    for target, num in ((0, num_b), (1, num_a)):
        src = ad.b if target == 0 else ad.a
        for idx in np.ndindex(src.shape):
            plus = np.array(src)
            minus = np.array(src)
            plus[idx] += step
            minus[idx] -= step
            if target == 0:
                num[idx] = (loss(plus, ad.a) - loss(minus, ad.a)) / (2 * step)
            else:
                num[idx] = (loss(ad.b, plus) - loss(ad.b, minus)) / (2 * step)
    ana = np.concatenate([grads.gb.ravel(), grads.ga.ravel()])
    return relative_error(ana, np.concatenate([num_b.ravel(), num_a.ravel()]))


@check("lora", "adapter gradients match finite differences")
def check_gradients() -> tuple[bool, str]:
    gen = np.random.default_rng(2024)
    worst = 0.0
    for i in range(20):
        m, n = int(gen.integers(2, 13)), int(gen.integers(2, 13))
        r = int(gen.choice([2, 4, 6, 8]))
        for k in sorted({1, r // 2, r}):
            worst = max(worst, finite_difference_error(m, n, r, k, seed=1000 + i))
    return worst <= 1e-5, f"max relative error {worst:.2e}"


@check("lora", "sparse local update leaves inactive entries untouched")
def check_sparsity() -> tuple[bool, str]:
    cfg = _with(standard_config(), rounds=3, rank=8, clients__count=4, clients__local_steps=5)
    cfg = _with(cfg, task__m=12, task__n=10, task__sample_count=400, task__holdout_count=64, clients__ranks={"kind": "uniform", "ratio": 0.25})
    # run_round extracts every delta through extract_delta, which rejects leaks
    result = _run(cfg)
    bad = 0
    gen = np.random.default_rng(5)
    for _ in range(20):
        before = AdapterPair(b=gen.standard_normal((6, 8)), a=gen.standard_normal((8, 5)))
        s = sample_random_k(SketchSpec(r=8, k=3), gen)
        step_b = apply_right(gen.standard_normal((6, 8)), s)
        step_a = apply_left(gen.standard_normal((8, 5)), s)
        after = AdapterPair(b=before.b - 0.1 * step_b, a=before.a - 0.1 * step_a)
        out = s.complement()
        if np.any(after.b[:, out] != before.b[:, out]) or np.any(after.a[out, :] != before.a[out, :]):
            bad += 1
        d = densify(extract_delta(before, after, s))
        if not (np.array_equal(d.b, after.b - before.b) and np.array_equal(d.a, after.a - before.a)):
            bad += 1
    return bad == 0 and len(result.metrics) == cfg.rounds, f"{bad} violations"


# ---- sketching ----


@check("sketching", "random-k sketch is unbiased")
def check_sketch_unbiased() -> tuple[bool, str]:
    r, k, draws = 8, 2, 100_000
    gen = RngStream(seed=11).generator()
    diag = np.zeros(r)
    b = gen.standard_normal((5, r))
    a = gen.standard_normal((r, 4))
    acc = np.zeros((5, 4))
    spec = SketchSpec(r=r, k=k)
    for _ in range(draws):
        s = sample_random_k(spec, gen)
        diag[s.index_array] += s.scale
        acc += apply_right(b, s) @ a
    diag /= draws
    err = relative_error(acc / draws, b @ a)
    ok = bool(np.all((diag >= 0.97) & (diag <= 1.03))) and err <= 0.02
    return ok, f"diag in [{diag.min():.4f}, {diag.max():.4f}], product error {err:.4f}"


@check("sketching", "sketched norm bounds")
def check_sketch_bounds() -> tuple[bool, str]:
    r, k = 8, 2
    gen = RngStream(seed=12).generator()
    x = gen.standard_normal((6, r))
    spec = SketchSpec(r=r, k=k)
    norm2 = float(np.sum(x * x))
    violations = 0
    for _ in range(1000):
        xs = apply_right(x, sample_random_k(spec, gen))
        if float(np.sum(xs * xs)) > (r / k) ** 2 * norm2 * (1 + 1e-12):
            violations += 1
    total = 0.0
    draws = 100_000
    for _ in range(draws):
        xs = apply_right(x, sample_random_k(spec, gen))
        total += float(np.sum(xs * xs))
    rel = abs(total / draws - (r / k) * norm2) / ((r / k) * norm2)
    return violations == 0 and rel <= 0.02, f"{violations} violations, E||XS||^2 off by {rel:.4f}"


# ---- federation ----


def _trajectory(cfg: ExperimentConfig, method: str) -> list[AdapterPair]:
    exp = build_experiment(cfg, Settings.load())
    states: list[AdapterPair] = []

    def on_round(metrics: RoundMetrics, state: GlobalState) -> None:
        states.append(state.adapters)

    if method == "fslora":
        run_experiment(exp.options, exp.dataset, exp.clients, cfg.rounds, r=cfg.rank, on_round=on_round)
    else:
        run_baseline(method, exp.options, exp.dataset, exp.clients, cfg.rounds, r=cfg.rank, on_round=on_round)
    return states


def _max_gap(xs: list[AdapterPair], ys: list[AdapterPair]) -> float:
    if len(xs) != len(ys):
        return math.inf
    gap = 0.0
    for x, y in zip(xs, ys):
        gap = max(gap, float(np.max(np.abs(x.b - y.b))), float(np.max(np.abs(x.a - y.a))))
    return gap


@check("federation", "full-rank FSLoRA matches FedLoRA")
def check_equivalence() -> tuple[bool, str]:
    cfg = _with(standard_config(), rounds=50, rank=4, clients__count=4, clients__local_steps=3)
    cfg = _with(cfg, task__m=12, task__n=12, task__sample_count=400, task__holdout_count=64, clients__ranks={"kind": "uniform", "ratio": 1.0})
    gap = _max_gap(_trajectory(cfg, "fslora"), _trajectory(cfg, "fedlora"))
    return gap <= 1e-12, f"max entry gap {gap:.2e} over {cfg.rounds} rounds"


def _seed_mean(cfg: ExperimentConfig, seeds: Iterable[int], value: Callable[[ExperimentResult], float]) -> float:
    vals = [value(_run(_with(cfg, seed=s, task__seed=s))) for s in seeds]
    return float(np.mean(vals))


@check("trends", "final loss does not improve as the sketching ratio shrinks")
def check_ratio_trend() -> tuple[bool, str]:
    base = standard_config()
    means = []
    for ratio in RATIO_GRID:
        cfg = _with(base, clients__ranks={"kind": "uniform", "ratio": ratio})
        means.append(_seed_mean(cfg, range(TRENDS_SEEDS), lambda res: res.metrics[-1].eval_loss))
    ok = all(later <= earlier for earlier, later in zip(means, means[1:]))
    return ok, ", ".join(f"{q:g}: {v:.4g}" for q, v in zip(RATIO_GRID, means))


def rounds_to_threshold(result: ExperimentResult, fraction: float = THRESHOLD_FRACTION) -> int:
    target = fraction * result.initial_eval_loss
    for m in result.metrics:
        if m.eval_loss <= target:
            return m.round
    return len(result.metrics) + 1


@check("trends", "more local steps reach the loss threshold no later")
def check_local_steps_trend() -> tuple[bool, str]:
    base = _with(standard_config(), clients__ranks={"kind": "uniform", "ratio": 0.5})
    means = []
    for h in LOCAL_STEPS_GRID:
        cfg = _with(base, clients__local_steps=h)
        means.append(_seed_mean(cfg, range(TRENDS_SEEDS), rounds_to_threshold))
    ok = all(later <= earlier for earlier, later in zip(means, means[1:]))
    return ok, ", ".join(f"H={h}: {v:.1f}" for h, v in zip(LOCAL_STEPS_GRID, means))


@check("trends", "top-k 0.5 halves uplink at bounded loss cost")
def check_topk() -> tuple[bool, str]:
    base = _with(standard_config(), clients__ranks={"kind": "uniform", "ratio": 0.5})
    seeds = range(5)
    plain = _seed_mean(base, seeds, lambda res: res.metrics[-1].eval_loss)
    comp_cfg = _with(base, topk_ratio=0.5)
    comp = _seed_mean(comp_cfg, seeds, lambda res: res.metrics[-1].eval_loss)
    k = 8
    payload = k * (32 + 32)
    expected = 10 * (4 * topk_kept(payload, 0.5) + bitmap_bytes(payload))
    measured = _run(comp_cfg).metrics[0].uplink_bytes
    factor = comp / plain if plain > 0 else math.inf
    ok = measured == expected and factor <= TOPK_LOSS_FACTOR
    return ok, f"uplink {measured}B (formula {expected}B), loss factor {factor:.3f}"


# ---- baselines ----


@check("baselines", "FlexLoRA redistribution is the best rank-k fit")
def check_flexlora() -> tuple[bool, str]:
    gen = np.random.default_rng(31)
    worst = 0.0
    for _ in range(20):
        locals_ = [AdapterPair(b=gen.standard_normal((10, 2)), a=gen.standard_normal((2, 9))) for _ in range(3)]
        m = sum(p.b @ p.a for p in locals_) / 3
        full = np.linalg.svd(m, compute_uv=False)
        for k in range(1, 7):
            out = flexlora_aggregate(locals_, [k] * len(locals_))[0]
            resid = float(np.linalg.norm(out.b @ out.a - m))
            worst = max(worst, abs(resid - float(np.sqrt(np.sum(full[k:] ** 2)))))
    return worst <= 1e-8, f"max residual gap {worst:.2e}"


@check("baselines", "FLoRA stacking and merge")
def check_flora() -> tuple[bool, str]:
    gen = np.random.default_rng(32)
    block = merge = 0.0
    for _ in range(20):
        ks = [int(k) for k in gen.integers(1, 5, size=3)]
        locals_ = [AdapterPair(b=gen.standard_normal((8, k)), a=gen.standard_normal((k, 7))) for k in ks]
        b_cat, a_cat = stack_modules(locals_)
        total = sum(p.b @ p.a for p in locals_)
        block = max(block, float(np.max(np.abs(b_cat @ a_cat - total))))
        w = gen.standard_normal((8, 7))
        before = w + (b_cat @ a_cat) / len(locals_)
        out = flora_round([w], locals_, ks, gen)
        after = out.bases[0] + out.adapters[0].b @ out.adapters[0].a
        merge = max(merge, float(np.max(np.abs(after - before))))
    return block <= 1e-10 and merge <= 1e-12, f"block gap {block:.2e}, merge gap {merge:.2e}"


# ---- secure aggregation ----


@check("secure", "masked aggregate equals plain aggregate")
def check_secure() -> tuple[bool, str]:
    gen = np.random.default_rng(41)
    worst = 0.0
    m, n, r = 6, 5, 8
    for trial in range(100):
        count = int(gen.choice([2, 5, 10]))
        sketches, deltas = {}, []
        for cid in range(count):
            s = sample_random_k(SketchSpec(r=r, k=int(gen.integers(3, 7))), gen)
            sketches[cid] = s
            deltas.append(
                SparseDelta(
                    indices=s.indices,
                    b_cols=gen.standard_normal((m, s.spec.k)),
                    a_rows=gen.standard_normal((s.spec.k, n)),
                    rank=r,
                    client_id=cid,
                )
            )
        seeds = provision_pair_seeds(list(sketches), RngStream(seed=trial))
        masks = derive_masks(sketches, seeds, round=0, m=m, n=n)
        masked = [mask_delta(d, masks[d.client_id]) for d in deltas]
        got = secure_aggregate(masked, list(sketches))
        want = sum_deltas(deltas, m, n, r)
        worst = max(worst, float(np.max(np.abs(got.b - want.b))), float(np.max(np.abs(got.a - want.a))))
    return worst <= 1e-10, f"max discrepancy {worst:.2e}"


# ---- costs ----


def cost_reconciliation(rounds: int = 2) -> list[str]:
    ks = [2, 4, 8]
    cfg = _with(standard_config(), rounds=rounds, rank=8, clients__count=3, clients__local_steps=2)
    cfg = _with(cfg, task__m=12, task__n=10, task__sample_count=300, task__holdout_count=32, clients__ranks={"kind": "list", "ranks": ks})
    cases = [
        ("fslora", cfg, None),
        ("fslora", _with(cfg, topk_ratio=0.5), 0.5),
        ("fslora", _with(cfg, participation=2), None),
        ("heterolora", _with(cfg, method="heterolora"), None),
        ("flexlora", _with(cfg, method="flexlora"), None),
        ("flora", _with(cfg, method="flora", participation=2), None),
        ("fedlora", _with(cfg, method="fedlora"), None),
    ]
    problems = []
    for method, c, ratio in cases:
        result = _run(c)
        use_ks = [c.rank] * len(ks) if method == "fedlora" else ks
        params = CostParams(m=c.task.m, n=c.task.n, r=c.rank, ks=tuple(use_ks), H=c.clients.local_steps, topk_ratio=ratio)
        for t, ledger in enumerate(result.ledgers):
            participants = sorted(ledger.uplink)
            for row in reconcile(method, params, ledger, participants):
                if not row.ok:
                    problems.append(f"{method} round {t} {row.direction} client {row.client}: {row.measured} != {row.predicted}")
    return problems


@check("costs", "measured payload bytes match closed forms")
def check_costs() -> tuple[bool, str]:
    problems = cost_reconciliation()
    big = CostParams(m=516096, n=516096, r=64, ks=(64,))
    params_ok = big.q // 4 == 66_060_288 and big.q == 252 * 1024 * 1024
    index_ok = 100 * bitmap_bytes(64) == 800
    detail = "; ".join(problems[:3]) if problems else f"q={big.q}B ({big.q / 2**20:.0f} MiB), 100 index sets = 800B"
    return not problems and params_ok and index_ok, detail


# ---- diagnostics ----


@check("diagnostics", "smoothness scales at most like r/k")
def check_smoothness() -> tuple[bool, str]:
    ds = generate_task(TaskSpec(m=12, n=12, true_rank=3, sample_count=300, holdout_count=0, seed=3))

    shard = Shard(owner=0, indices=np.arange(len(ds)))
    r = 8
    parts, ok = [], True
    for k in (2, 4, 8):
        p = smoothness_ratio_probe(ds, shard, r=r, k=k, probes=16, rng=RngStream(seed=50 + k))
        ok = ok and p.ratio <= (r / k) * 1.10
        parts.append(f"k={k}: {p.ratio:.3f} (bound {r / k:g})")
    return ok, ", ".join(parts)


@check("diagnostics", "stochastic sketched gradient is unbiased")
def check_gradient_unbiased() -> tuple[bool, str]:
    ds = generate_task(TaskSpec(m=8, n=8, true_rank=2, sample_count=200, holdout_count=0, seed=4))

    shard = Shard(owner=0, indices=np.arange(len(ds)))
    state = sample_states(8, 8, 8, 1, RngStream(seed=60))[0]
    err = unbiasedness_error(ds, shard, state, k=2, draws=100_000, rng=RngStream(seed=61))
    return err <= 0.02, f"relative error {err:.4f}"


# ---- harness ----


@check("harness", "replayed run reproduces artifacts byte for byte")
def check_determinism() -> tuple[bool, str]:
    cfg = _with(standard_config(), rounds=5, clients__count=3, clients__local_steps=2)
    cfg = _with(cfg, task__m=10, task__n=10, task__sample_count=200, task__holdout_count=32, clients__ranks={"kind": "uniform", "ratio": 0.5})
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        one = execute_run(cfg, root=Path(a), run_id="replay")
        two = execute_run(cfg, root=Path(b), run_id="replay")
        same = all(
            (one.directory / name).read_bytes() == (two.directory / name).read_bytes() for name in ("metrics.csv", "adapters.npz")
        )
    return same, "metrics and snapshot identical" if same else "artifacts differ"


def run_checks(only: Iterable[str] | None = None) -> list[CheckResult]:
    wanted = set(only or [])
    unknown = wanted - set(groups())
    if unknown:
        from fslora.errors import ConfigError

        raise ConfigError("unknown check groups", keys=sorted(unknown))
    out = []
    for group, name, fn in _REGISTRY:
        if wanted and group not in wanted:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        res = CheckResult(name=name, group=group, ok=bool(ok), detail=detail, seconds=time.perf_counter() - t0)
        logger.info("[%s] %s: %s (%s)", "PASS" if res.ok else "FAIL", group, name, detail)
        out.append(res)
    return out
