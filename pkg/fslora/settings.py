from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path


def _get_bool(name: str, default: bool) -> bool:
    v = os.environ.get(name)
    if v is None:
        return default
    return v.strip().lower() in {"1", "true", "yes", "y", "on"}


def _get_int(name: str, default: int) -> int:
    v = os.environ.get(name)
    if v is None:
        return default
    try:
        return int(v)
    except Exception:
        return default


def _get_float(name: str, default: float) -> float:
    v = os.environ.get(name)
    if v is None:
        return default
    try:
        return float(v)
    except Exception:
        return default


def _get_str(name: str, default: str | None = None) -> str | None:
    v = os.environ.get(name)
    if v is None:
        return default
    s = v.strip()
    return s if s else default


DEFAULT_OUTPUT_DIR = Path.cwd() / "runs"


@dataclass(frozen=True)
class Settings:
    output_dir: Path
    workers: int
    log_level: str
    mask_stddev: float
    api_max_points: int
    log_every: int
    quiet: bool

    @staticmethod
    def load() -> "Settings":
        level = (_get_str("FSL_LOG_LEVEL", "INFO") or "INFO").upper()
        if not isinstance(logging.getLevelName(level), int):
            level = "INFO"
        return Settings(
            output_dir=Path(_get_str("FSL_OUTPUT_DIR", str(DEFAULT_OUTPUT_DIR)) or DEFAULT_OUTPUT_DIR),
            workers=max(1, _get_int("FSL_WORKERS", 1)),
            log_level=level,
            mask_stddev=max(0.0, _get_float("FSL_MASK_STDDEV", 1.0)),
            api_max_points=max(2, _get_int("FSL_API_MAX_POINTS", 240)),
            log_every=max(1, _get_int("FSL_LOG_EVERY", 10)),
            quiet=_get_bool("FSL_QUIET", False),
        )


def effective_settings_dict(settings: Settings) -> dict:
    d = asdict(settings)
    d["output_dir"] = str(settings.output_dir)
    return d
