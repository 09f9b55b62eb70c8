from __future__ import annotations

import csv
import io
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, Field

from fslora.federation import RoundMetrics
from fslora.settings import Settings

ARTIFACT_VERSION = 1
MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.csv"
SNAPSHOT_NAME = "adapters.npz"
DIAGNOSTICS_NAME = "diagnostics.json"

# Fixed zip member timestamp so snapshots of equal arrays are equal bytes.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

RUNS_DIR = Settings.load().output_dir


class RunManifest(BaseModel):
    artifact_version: int = ARTIFACT_VERSION
    run_id: str
    status: Literal["running", "completed", "failed"] = "running"
    error: str | None = None
    method: str
    config: dict[str, Any]
    master_seed: int
    module_seeds: dict[str, int] = Field(default_factory=dict)
    input_hashes: dict[str, str] = Field(default_factory=dict)
    base_checksum_start: str | None = None
    base_checksum_end: str | None = None
    rounds_completed: int = 0
    initial_eval_loss: float | None = None
    best_eval_loss: float | None = None
    final_eval_loss: float | None = None
    notes: dict[str, float] = Field(default_factory=dict)
    started_at: str | None = None
    finished_at: str | None = None


def run_dir(run_id: str, root: Path | None = None) -> Path:
    return (root or RUNS_DIR) / run_id


def save_manifest(manifest: RunManifest, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest.model_dump(mode="json"), ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )


def load_manifest(directory: Path) -> RunManifest | None:
    try:
        path = directory / MANIFEST_NAME
        if not path.exists():
            return None
        raw = path.read_text(encoding="utf-8").strip()
        if not raw:
            return None
        return RunManifest.model_validate_json(raw)
    except Exception:
        return None


class MetricsWriter:
    """Metrics CSV that is flushed after every row, so a crash keeps finished rounds."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self._f = path.open("w", encoding="utf-8", newline="")
        self._w = csv.DictWriter(self._f, fieldnames=list(RoundMetrics.CSV_FIELDS))
        self._w.writeheader()
        self._f.flush()
        self.rows = 0

    def write(self, metrics: RoundMetrics) -> None:
        self._w.writerow(metrics.csv_row())
        self._f.flush()
        self.rows += 1

    def close(self) -> None:
        if not self._f.closed:
            self._f.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def _coerce(field: str, value: str) -> float | int:
    if field in ("train_loss", "eval_loss", "grad_norm"):
        return float(value)
    return int(value)


def load_metrics(directory: Path) -> list[dict[str, float | int]] | None:
    path = directory / METRICS_NAME
    if not path.exists():
        return None
    rows: list[dict[str, float | int]] = []
    try:
        with path.open("r", encoding="utf-8", newline="") as f:
            for row in csv.DictReader(f):
                rows.append({k: _coerce(k, v) for k, v in row.items()})
    except Exception:
        return None
    return rows


def save_snapshot(path: Path, **arrays: np.ndarray) -> None:
    """An .npz readable by `np.load`, written with fixed member timestamps."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name], dtype=np.float64), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH), buf.getvalue())


def load_snapshot(path: Path) -> dict[str, np.ndarray] | None:
    if not path.exists():
        return None
    try:
        with np.load(path, allow_pickle=False) as data:
            return {k: np.array(data[k]) for k in data.files}
    except Exception:
        return None


@dataclass(frozen=True)
class CurvePoint:
    round: int
    value: float


def _downsample(points: list[CurvePoint], max_points: int) -> list[CurvePoint]:
    if max_points <= 0 or len(points) <= max_points:
        return points
    step = int(math.ceil(len(points) / max_points))
    out = points[::step]
    # Keep the last round so the curve ends at the final value.
    if out and out[-1].round != points[-1].round:
        out.append(points[-1])
    return out


def load_curve(directory: Path, *, field: str = "eval_loss", max_points: int = 240) -> list[CurvePoint] | None:
    rows = load_metrics(directory)
    if rows is None:
        return None
    points = [CurvePoint(round=int(r["round"]), value=float(r[field])) for r in rows if field in r]
    return _downsample(points, max_points=max_points)


def list_runs(root: Path | None = None) -> list[RunManifest]:
    base = root or RUNS_DIR
    if not base.exists():
        return []
    out = []
    for d in sorted(p for p in base.iterdir() if p.is_dir()):
        m = load_manifest(d)
        if m is not None:
            out.append(m)
    return out
