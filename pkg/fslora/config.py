from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fslora.costs import Method
from fslora.errors import ConfigError, RangeError
from fslora.federation import ClientConfig, Denominator, EngineOptions, ExperimentResult, RoundCallback, SketchKind
from fslora.numerics import RngStream
from fslora.ranks import RankPolicy, assign_ranks
from fslora.settings import Settings
from fslora.synth_tasks import Dataset, TaskSpec, dirichlet_partition, generate_task, iid_partition

CONFIG_VERSION = 1


class ClientsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    count: int = Field(10, ge=1)
    alpha: float | None = Field(None, gt=0, description="Dirichlet concentration; empty means an IID split")
    ranks: RankPolicy = Field(default_factory=RankPolicy)
    local_steps: int = Field(10, ge=1, description="H")
    lr: float = Field(0.005, ge=0, description="local learning rate gamma")
    batch_size: int = Field(16, description="mini-batch size; <= 0 means the full shard")


class DiagnosticsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    states: int = Field(8, ge=1)
    samples: int = Field(64, ge=1)
    probes: int = Field(8, ge=1)
    draws: int = Field(256, ge=1, description="Monte Carlo sketch draws for non-quadratic tasks")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: Literal[1] = CONFIG_VERSION
    method: Method = "fslora"
    seed: int = 0
    rounds: int = Field(50, ge=1, description="T")
    rank: int = Field(16, ge=1, description="global rank r")
    task: TaskSpec = Field(default_factory=TaskSpec)
    clients: ClientsSection = Field(default_factory=ClientsSection)
    participation: int | Literal["all"] = "all"
    denominator: Denominator = "participant-count"
    sketch_kind: SketchKind = "random-k"
    topk_ratio: float | None = Field(None, gt=0, le=1)
    secure: bool = False
    mask_stddev: float | None = Field(None, ge=0)
    lora_scale: float = Field(1.0, gt=0)
    workers: int | None = Field(None, ge=1)
    diagnostics: DiagnosticsSection = Field(default_factory=DiagnosticsSection)

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if isinstance(self.participation, int) and not (1 <= self.participation <= self.clients.count):
            raise ValueError(f"participation {self.participation} outside [1, {self.clients.count}]")
        if self.method != "fslora" and self.topk_ratio is not None and self.topk_ratio < 1:
            raise ValueError("topk_ratio applies to the fslora method only")
        if self.method != "fslora" and self.secure:
            raise ValueError("secure aggregation applies to the fslora method only")
        if self.secure and self.topk_ratio is not None and self.topk_ratio < 1:
            raise ValueError("secure aggregation cannot be combined with top-k upload compression")
        if self.method != "fslora" and self.sketch_kind != "random-k":
            raise ValueError("sketch_kind applies to the fslora method only")
        return self


def _error_keys(e: ValidationError) -> list[str]:
    keys = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err.get("loc", ()))
        keys.append(loc or "<root>")
    return sorted(set(keys))


def validate_config(data: Any) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError("invalid experiment config", keys=_error_keys(e)) from e


def _decode_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except Exception:
        return raw


def apply_overrides(data: dict, pairs: list[str]) -> dict:
    """Apply `dotted.key=value` pairs; values are JSON when they parse, strings otherwise."""
    out = json.loads(json.dumps(data))
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError("override must look like key.path=value", keys=[pair])
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            child = node.get(p)
            if child is None:
                child = node[p] = {}
            if not isinstance(child, dict):
                raise ConfigError("override descends into a non-object", keys=[key])
            node = child
        node[parts[-1]] = _decode_value(raw.strip())
    return out


def load_config(path: Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: Any = {}
    if path is not None:
        try:
            raw = path.read_text(encoding="utf-8").strip()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            data = json.loads(raw) if raw else {}
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
    if overrides:
        data = apply_overrides(data, overrides)
    return validate_config(data)


def save_config(cfg: ExperimentConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.model_dump(mode="json"), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def module_seeds(cfg: ExperimentConfig) -> dict[str, int]:
    root = RngStream(seed=cfg.seed)
    return {
        "master": cfg.seed,
        "task": cfg.task.seed,
        "partition": root.child("partition").stream,
        "ranks": root.child("ranks").stream,
        "init_adapters": root.child("init-adapters").stream,
    }


@dataclass(frozen=True)
class Experiment:
    config: ExperimentConfig
    dataset: Dataset
    clients: tuple[ClientConfig, ...]
    options: EngineOptions

    @property
    def r(self) -> int:
        return self.config.rank

    def run(self, on_round: RoundCallback | None = None) -> ExperimentResult:
        if self.config.method == "fslora":
            from fslora.federation import run_experiment

            return run_experiment(self.options, self.dataset, self.clients, self.config.rounds, r=self.r, on_round=on_round)
        from fslora.baselines import run_baseline

        return run_baseline(
            self.config.method, self.options, self.dataset, self.clients, self.config.rounds, r=self.r, on_round=on_round
        )


def engine_options(cfg: ExperimentConfig, settings: Settings | None = None) -> EngineOptions:
    settings = settings or Settings.load()
    return EngineOptions(
        seed=cfg.seed,
        participation=cfg.participation,
        denominator=cfg.denominator,
        sketch_kind=cfg.sketch_kind,
        topk_ratio=cfg.topk_ratio,
        secure=cfg.secure,
        mask_stddev=cfg.mask_stddev if cfg.mask_stddev is not None else settings.mask_stddev,
        lora_scale=cfg.lora_scale,
        workers=cfg.workers or settings.workers,
        log_every=settings.log_every,
    )


def build_experiment(cfg: ExperimentConfig, settings: Settings | None = None, *, dataset: Dataset | None = None) -> Experiment:
    """Task, shards, rank schedules and engine options, all derived from the config seeds."""
    if cfg.task.true_rank > min(cfg.task.m, cfg.task.n):
        raise ConfigError("task rank exceeds the task shape", keys=["task.true_rank"])
    dataset = dataset or generate_task(cfg.task)
    root = RngStream(seed=cfg.seed)
    c = cfg.clients
    if c.alpha is None:
        shards = iid_partition(dataset, c.count, root.child("partition"))
    else:
        shards = dirichlet_partition(dataset, c.count, c.alpha, root.child("partition"))
    try:
        schedules = assign_ranks(c.ranks, c.count, cfg.rank, root.child("ranks"))
    except RangeError as e:
        raise ConfigError(str(e), keys=["clients.ranks"]) from e
    clients = tuple(
        ClientConfig(id=i, schedule=schedules[i], shard=shards[i], local_steps=c.local_steps, lr=c.lr, batch_size=c.batch_size)
        for i in range(c.count)
    )
    return Experiment(config=cfg, dataset=dataset, clients=clients, options=engine_options(cfg, settings))
