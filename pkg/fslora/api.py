from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from fslora import __version__
from fslora.artifacts import list_runs, load_curve, load_manifest, load_metrics, run_dir
from fslora.costs import CostParams, cost_table
from fslora.errors import RangeError
from fslora.settings import Settings, effective_settings_dict

app = FastAPI(title="FSLoRA run artifacts")

settings = Settings.load()


class ApiCostRequest(BaseModel):
    m: int = Field(ge=1)
    n: int = Field(ge=1)
    r: int = Field(ge=1)
    ks: list[int] = Field(min_length=1)
    H: int = Field(1, ge=1)
    topk_ratio: float | None = None


def _run_path(run_id: str) -> Path | None:
    rid = (run_id or "").strip()
    if not rid or rid in {".", ".."} or "/" in rid or "\\" in rid:
        return None
    d = run_dir(rid)
    return d if d.is_dir() else None


def _not_found(what: str) -> JSONResponse:
    return JSONResponse({"ok": False, "error": f"{what} not found"}, status_code=404)


@app.get("/health")
async def health() -> dict:
    return {"ok": True, "version": __version__, "settings": effective_settings_dict(settings)}


@app.get("/api/runs")
async def api_runs() -> JSONResponse:
    runs = [
        {
            "run_id": m.run_id,
            "method": m.method,
            "status": m.status,
            "rounds_completed": m.rounds_completed,
            "final_eval_loss": m.final_eval_loss,
            "best_eval_loss": m.best_eval_loss,
            "started_at": m.started_at,
        }
        for m in list_runs()
    ]
    return JSONResponse({"runs": runs})


@app.get("/api/runs/{run_id}/manifest")
async def api_run_manifest(run_id: str) -> JSONResponse:
    d = _run_path(run_id)
    manifest = load_manifest(d) if d is not None else None
    if manifest is None:
        return _not_found("run")
    return JSONResponse(manifest.model_dump(mode="json"))


@app.get("/api/runs/{run_id}/metrics")
async def api_run_metrics(run_id: str) -> JSONResponse:
    d = _run_path(run_id)
    rows = load_metrics(d) if d is not None else None
    if rows is None:
        return _not_found("metrics")
    return JSONResponse({"run_id": run_id, "rows": rows})


@app.get("/api/runs/{run_id}/curve")
async def api_run_curve(run_id: str, request: Request) -> JSONResponse:
    field = request.query_params.get("field", "eval_loss").strip() or "eval_loss"
    if field not in ("train_loss", "eval_loss", "grad_norm"):
        return JSONResponse({"ok": False, "error": "invalid field"}, status_code=400)
    max_points_raw = request.query_params.get("max_points", "").strip()
    max_points = settings.api_max_points
    try:
        if max_points_raw:
            max_points = max(2, min(settings.api_max_points, int(max_points_raw)))
    except Exception:
        max_points = settings.api_max_points

    d = _run_path(run_id)
    points = load_curve(d, field=field, max_points=max_points) if d is not None else None
    if points is None:
        return _not_found("metrics")
    return JSONResponse({"run_id": run_id, "field": field, "points": [asdict(p) for p in points]})


@app.post("/api/costs")
async def api_costs(req: ApiCostRequest) -> JSONResponse:
    try:
        params = CostParams(m=req.m, n=req.n, r=req.r, ks=tuple(req.ks), H=req.H, topk_ratio=req.topk_ratio)
    except RangeError as e:
        return JSONResponse({"ok": False, "error": str(e)}, status_code=400)
    return JSONResponse({"ok": True, "q": params.q, "P": params.P, "rows": cost_table(params)})
