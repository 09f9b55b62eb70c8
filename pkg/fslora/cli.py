from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from pydantic import ValidationError

from fslora import __version__
from fslora.artifacts import DIAGNOSTICS_NAME, run_dir
from fslora.config import ExperimentConfig, build_experiment, load_config
from fslora.costs import METHODS, CostParams, cost_table, reconcile
from fslora.diagnostics import diagnose, write_report
from fslora.errors import ConfigError, FsloraError
from fslora.numerics import RngStream
from fslora.runner import default_run_id, execute_run
from fslora.settings import Settings

logger = logging.getLogger("fslora")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def print_table(rows: Sequence[dict], fields: Sequence[str]) -> None:
    cells = [[_fmt(row.get(f)) for f in fields] for row in rows]
    widths = [max(len(f), *(len(c[i]) for c in cells)) if cells else len(f) for i, f in enumerate(fields)]
    print("  ".join(f.ljust(w) for f, w in zip(fields, widths)))
    print("  ".join("-" * w for w in widths))
    for c in cells:
        print("  ".join(v.ljust(w) for v, w in zip(c, widths)))


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="experiment config (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--rounds", type=int, default=None)


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    pairs = list(args.overrides)
    if args.seed is not None:
        pairs.append(f"seed={args.seed}")
    if args.method is not None:
        pairs.append(f"method={json.dumps(args.method)}")
    if args.rounds is not None:
        pairs.append(f"rounds={args.rounds}")
    return load_config(args.config, pairs)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fslora", description="Federated sketched-LoRA simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default=None, help="overrides FSL_LOG_LEVEL")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write its artifacts")
    _add_config_args(run)
    run.add_argument("--output", type=Path, default=None, help="output root (default FSL_OUTPUT_DIR)")
    run.add_argument("--run-id", default=None)

    sweep = sub.add_parser("sweep", help="run a grid of experiments and summarize seed means")
    sweep.add_argument("--grid", type=Path, required=True, help="sweep spec (JSON)")
    sweep.add_argument("--output", type=Path, default=None)
    sweep.add_argument("--processes", type=int, default=1)

    diag = sub.add_parser("diagnose", help="estimate gradient bounds, variance, dissimilarity and smoothness ratios")
    _add_config_args(diag)
    diag.add_argument("--output", type=Path, default=None, help="report path (default <run dir>/diagnostics.json)")

    costs = sub.add_parser("validate-costs", help="reconcile measured payload bytes with the closed forms")
    _add_config_args(costs)

    val = sub.add_parser("validate", help="run the invariant and oracle checks")
    val.add_argument("--only", action="append", default=[], metavar="GROUP", help="restrict to a check group")
    return p


def cmd_run(args: argparse.Namespace, settings: Settings) -> int:
    cfg = _config_from_args(args)
    out = execute_run(cfg, root=args.output, run_id=args.run_id, settings=settings)
    m = out.manifest
    print(f"run {out.run_id}: {m.rounds_completed} rounds, final eval {_fmt(m.final_eval_loss)}, best {_fmt(m.best_eval_loss)}")
    print(f"artifacts: {out.directory}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, settings: Settings) -> int:
    from fslora.sweep import SUMMARY_FIELDS, SweepSpec, run_sweep

    try:
        spec = SweepSpec.model_validate_json(args.grid.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read sweep spec {args.grid}: {e}") from e
    root = args.output or (settings.output_dir / args.grid.stem)
    rows = run_sweep(spec, root, processes=max(1, args.processes))
    print_table(rows, SUMMARY_FIELDS)
    return EXIT_FAILED if any(r["failures"] for r in rows) else EXIT_OK


def cmd_diagnose(args: argparse.Namespace, settings: Settings) -> int:
    cfg = _config_from_args(args)
    exp = build_experiment(cfg, settings)
    d = cfg.diagnostics
    k = min(c.rank_at(0, cfg.rank) for c in exp.clients)
    est = diagnose(
        exp.dataset,
        [c.shard for c in exp.clients],
        r=cfg.rank,
        k=k,
        rng=RngStream(seed=cfg.seed).child("diagnostics"),
        states=d.states,
        samples=d.samples,
        probes=d.probes,
        batch_size=cfg.clients.batch_size,
        draws=d.draws,
    )
    path = args.output or run_dir(default_run_id(cfg), settings.output_dir) / DIAGNOSTICS_NAME
    write_report(est, path)
    print(f"rho={est.rho:.4g} sigma2={est.sigma2:.4g} c_h={est.c_h:.4g} delta_h2={est.delta_h2:.4g} (k={k}, r={cfg.rank})")
    print_table([row.model_dump() for row in est.smoothness], ("k", "ratio", "bound", "identity_l", "probes", "skipped"))
    print(f"report: {path}")
    return EXIT_OK


def cmd_validate_costs(args: argparse.Namespace, settings: Settings) -> int:
    cfg = _config_from_args(args).model_copy(update={"rounds": 1})
    exp = build_experiment(cfg, settings)
    r = cfg.rank
    ks = tuple(r if cfg.method == "fedlora" else c.rank_at(0, r) for c in exp.clients)
    params = CostParams(
        m=cfg.task.m, n=cfg.task.n, r=r, ks=ks, H=cfg.clients.local_steps, topk_ratio=cfg.topk_ratio
    )
    print_table(cost_table(params), ("method", "client", "k", "uplink_bytes", "downlink_bytes", "client_memory_bytes", "server_memory_bytes"))
    print()
    ledger = exp.run().ledgers[0]
    rows = reconcile(cfg.method, params, ledger, sorted(ledger.uplink))
    print_table(
        [{"method": x.method, "client": x.client, "direction": x.direction, "measured": x.measured, "predicted": x.predicted, "ok": x.ok} for x in rows],
        ("method", "client", "direction", "measured", "predicted", "ok"),
    )
    bad = [x for x in rows if not x.ok]
    if bad:
        logger.error("%d cost rows disagree with the closed forms", len(bad))
    return EXIT_FAILED if bad else EXIT_OK


def cmd_validate(args: argparse.Namespace, settings: Settings) -> int:
    from fslora.validate import run_checks

    results = run_checks(args.only or None)
    print_table(
        [{"group": r.group, "check": r.name, "status": "PASS" if r.ok else "FAIL", "seconds": round(r.seconds, 2), "detail": r.detail} for r in results],
        ("group", "check", "status", "seconds", "detail"),
    )
    failed = sum(1 for r in results if not r.ok)
    print(f"\n{len(results) - failed}/{len(results)} checks passed")
    return EXIT_FAILED if failed else EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
    "validate-costs": cmd_validate_costs,
    "validate": cmd_validate,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = Settings.load()
    level = (args.log_level or ("WARNING" if settings.quiet else settings.log_level)).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args, settings)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except ValidationError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except FsloraError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
