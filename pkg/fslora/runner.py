from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from fslora.artifacts import (
    METRICS_NAME,
    SNAPSHOT_NAME,
    MetricsWriter,
    RunManifest,
    run_dir,
    save_manifest,
    save_snapshot,
)
from fslora.config import ExperimentConfig, build_experiment, module_seeds
from fslora.errors import FsloraError
from fslora.federation import ExperimentResult, GlobalState, RoundMetrics
from fslora.numerics import content_hash
from fslora.settings import Settings

logger = logging.getLogger(__name__)

# Loss threshold for the local-steps trend, relative to the initial eval loss.
THRESHOLD_FRACTION = 0.1
# Pinned degradation allowed for top-k 0.5 against the uncompressed run.
TOPK_LOSS_FACTOR = 1.5


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def config_hash(cfg: ExperimentConfig) -> str:
    raw = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


def default_run_id(cfg: ExperimentConfig) -> str:
    return f"{cfg.method}-seed{cfg.seed}-{config_hash(cfg)[:10]}"


@dataclass
class RunOutcome:
    run_id: str
    directory: Path
    manifest: RunManifest
    result: ExperimentResult | None


def execute_run(
    cfg: ExperimentConfig,
    *,
    root: Path | None = None,
    run_id: str | None = None,
    settings: Settings | None = None,
) -> RunOutcome:
    """Run one experiment and persist manifest, metrics CSV and the final adapter snapshot.

    On a library error the rows finished so far stay in the CSV, the manifest is
    marked failed, and the error is re-raised.
    """
    settings = settings or Settings.load()
    rid = run_id or default_run_id(cfg)
    directory = run_dir(rid, root if root is not None else settings.output_dir)
    directory.mkdir(parents=True, exist_ok=True)

    exp = build_experiment(cfg, settings)
    ds = exp.dataset
    manifest = RunManifest(
        run_id=rid,
        method=cfg.method,
        config=cfg.model_dump(mode="json"),
        master_seed=cfg.seed,
        module_seeds=module_seeds(cfg),
        input_hashes={
            "config": config_hash(cfg),
            "w0": content_hash(ds.w0),
            "w_star": content_hash(ds.w_star),
            "train": content_hash(ds.inputs, ds.targets),
        },
        started_at=_now(),
    )
    if cfg.topk_ratio is not None:
        manifest.notes = {"topk_loss_factor": TOPK_LOSS_FACTOR, "threshold_fraction": THRESHOLD_FRACTION}
    save_manifest(manifest, directory)

    last: dict[str, RoundMetrics] = {}

    with MetricsWriter(directory / METRICS_NAME) as writer:

        def on_round(metrics: RoundMetrics, state: GlobalState) -> None:
            writer.write(metrics)
            last["metrics"] = metrics

        try:
            result = exp.run(on_round=on_round)
        except FsloraError as e:
            manifest.status = "failed"
            manifest.error = str(e)
            manifest.rounds_completed = writer.rows
            if "metrics" in last:
                manifest.final_eval_loss = last["metrics"].eval_loss
            manifest.finished_at = _now()
            save_manifest(manifest, directory)
            logger.error("run %s failed after %d rounds: %s", rid, writer.rows, e)
            raise

    state = result.final_state
    if state is not None:
        save_snapshot(directory / SNAPSHOT_NAME, b=state.adapters.b, a=state.adapters.a, base=state.base.w0)
    manifest.status = "completed"
    manifest.rounds_completed = len(result.metrics)
    manifest.base_checksum_start = result.base_checksum_start
    manifest.base_checksum_end = result.base_checksum_end
    manifest.initial_eval_loss = result.initial_eval_loss
    manifest.best_eval_loss = result.best_eval_loss
    manifest.final_eval_loss = result.metrics[-1].eval_loss if result.metrics else None
    manifest.finished_at = _now()
    save_manifest(manifest, directory)
    logger.info("run %s completed: %d rounds, final eval %.6g", rid, manifest.rounds_completed, manifest.final_eval_loss or 0.0)
    return RunOutcome(run_id=rid, directory=directory, manifest=manifest, result=result)


def replay_config(manifest: RunManifest) -> ExperimentConfig:
    return ExperimentConfig.model_validate(manifest.config)
