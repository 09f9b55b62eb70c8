from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, model_validator

from fslora.config import ExperimentConfig, apply_overrides, validate_config
from fslora.costs import Method
from fslora.errors import FsloraError
from fslora.runner import execute_run

logger = logging.getLogger(__name__)

SUMMARY_NAME = "summary.csv"
SUMMARY_FIELDS = (
    "method",
    "rank",
    "ratio",
    "local_rank",
    "runs",
    "failures",
    "final_eval_mean",
    "final_eval_std",
    "best_eval_mean",
    "best_eval_std",
    "uplink_bytes_per_round",
    "downlink_bytes_per_round",
)


class SweepSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base: dict[str, Any] = Field(default_factory=dict, description="experiment config shared by every grid point")
    methods: list[Method] = Field(default_factory=lambda: ["fslora"])
    ranks: list[int] = Field(default_factory=list, description="global ranks r; empty keeps the base rank")
    ratios: list[float] = Field(default_factory=list, description="uniform sketching ratios k/r")
    local_ranks: list[int] = Field(default_factory=list, description="fixed k for every client, alternative to ratios")
    seeds: list[int] = Field(default_factory=lambda: [0])

    @model_validator(mode="after")
    def _axes(self) -> "SweepSpec":
        if self.ratios and self.local_ranks:
            raise ValueError("use either ratios or local_ranks, not both")
        if not self.seeds or not self.methods:
            raise ValueError("seeds and methods must not be empty")
        return self


@dataclass(frozen=True)
class GridPoint:
    method: str
    rank: int | None
    ratio: float | None
    local_rank: int | None
    seed: int

    @property
    def run_id(self) -> str:
        parts = [self.method]
        if self.rank is not None:
            parts.append(f"r{self.rank}")
        if self.ratio is not None:
            parts.append(f"ratio{self.ratio:g}")
        if self.local_rank is not None:
            parts.append(f"k{self.local_rank}")
        parts.append(f"seed{self.seed}")
        return "-".join(parts)

    def overrides(self, clients: int) -> list[str]:
        out = [f"method={json.dumps(self.method)}", f"seed={self.seed}"]
        if self.rank is not None:
            out.append(f"rank={self.rank}")
        if self.ratio is not None:
            out.append('clients.ranks={"kind": "uniform", "ratio": %s}' % json.dumps(self.ratio))
        if self.local_rank is not None:
            out.append('clients.ranks={"kind": "list", "ranks": %s}' % json.dumps([self.local_rank] * clients))
        return out


def grid_points(spec: SweepSpec) -> list[GridPoint]:
    ranks: list[int | None] = list(spec.ranks) or [None]
    ratios: list[float | None] = list(spec.ratios) or [None]
    ks: list[int | None] = list(spec.local_ranks) or [None]
    return [
        GridPoint(method=m, rank=r, ratio=q, local_rank=k, seed=s)
        for m, r, q, k, s in itertools.product(spec.methods, ranks, ratios, ks, spec.seeds)
    ]


def point_config(spec: SweepSpec, point: GridPoint) -> ExperimentConfig:
    base = validate_config(spec.base)
    return validate_config(apply_overrides(spec.base, point.overrides(base.clients.count)))


@dataclass
class PointResult:
    point: GridPoint
    ok: bool
    error: str | None = None
    final_eval: float | None = None
    best_eval: float | None = None
    uplink_per_round: float | None = None
    downlink_per_round: float | None = None


def _run_point(spec_json: str, point: GridPoint, root: str) -> PointResult:
    spec = SweepSpec.model_validate_json(spec_json)
    try:
        cfg = point_config(spec, point)
        out = execute_run(cfg, root=Path(root), run_id=point.run_id)
    except (FsloraError, ValueError, ArithmeticError) as e:
        return PointResult(point=point, ok=False, error=str(e))
    metrics = out.result.metrics if out.result else []
    rounds = max(1, len(metrics))
    return PointResult(
        point=point,
        ok=True,
        final_eval=out.manifest.final_eval_loss,
        best_eval=out.manifest.best_eval_loss,
        uplink_per_round=sum(m.uplink_bytes for m in metrics) / rounds,
        downlink_per_round=sum(m.downlink_bytes for m in metrics) / rounds,
    )


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


def summarize(results: list[PointResult]) -> list[dict[str, Any]]:
    """One row per grid point with seeds folded into mean/std."""
    groups: dict[tuple, list[PointResult]] = {}
    for res in results:
        p = res.point
        groups.setdefault((p.method, p.rank, p.ratio, p.local_rank), []).append(res)
    rows = []
    for (method, rank, ratio, local_rank), items in groups.items():
        ok = [i for i in items if i.ok]
        fe_mean, fe_std = _mean_std([i.final_eval for i in ok if i.final_eval is not None])
        be_mean, be_std = _mean_std([i.best_eval for i in ok if i.best_eval is not None])
        up, _ = _mean_std([i.uplink_per_round for i in ok if i.uplink_per_round is not None])
        down, _ = _mean_std([i.downlink_per_round for i in ok if i.downlink_per_round is not None])
        rows.append(
            {
                "method": method,
                "rank": rank,
                "ratio": ratio,
                "local_rank": local_rank,
                "runs": len(items),
                "failures": len(items) - len(ok),
                "final_eval_mean": fe_mean,
                "final_eval_std": fe_std,
                "best_eval_mean": be_mean,
                "best_eval_std": be_std,
                "uplink_bytes_per_round": up,
                "downlink_bytes_per_round": down,
            }
        )
    return rows


def write_summary(rows: list[dict[str, Any]], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(SUMMARY_FIELDS))
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else (repr(row[k]) if isinstance(row[k], float) else row[k])) for k in SUMMARY_FIELDS})


def run_sweep(spec: SweepSpec, root: Path, *, processes: int = 1) -> list[dict[str, Any]]:
    """Run every grid point into its own directory under `root`, then write summary.csv.

    A failing point is logged and recorded; the sweep carries on.
    """
    validate_config(spec.base)
    points = grid_points(spec)
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.json").write_text(json.dumps(spec.model_dump(mode="json"), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    spec_json = spec.model_dump_json()
    logger.info("sweep: %d grid points into %s", len(points), root)

    if processes > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=processes) as pool:
            results = list(pool.map(_run_point, [spec_json] * len(points), points, [str(root)] * len(points)))
    else:
        results = [_run_point(spec_json, p, str(root)) for p in points]

    for res in results:
        if not res.ok:
            logger.warning("sweep point %s failed: %s", res.point.run_id, res.error)
    rows = summarize(results)
    write_summary(rows, root / SUMMARY_NAME)
    (root / "points.json").write_text(
        json.dumps([asdict(r) for r in results], ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    return rows
