import csv
import json

import numpy as np
import pytest

import fslora.artifacts as artifacts
from fslora.artifacts import (
    CurvePoint,
    MetricsWriter,
    RunManifest,
    _downsample,
    list_runs,
    load_curve,
    load_manifest,
    load_metrics,
    load_snapshot,
    save_manifest,
    save_snapshot,
)
from fslora.config import validate_config
from fslora.errors import NumericalError
from fslora.federation import RoundMetrics
from fslora.runner import default_run_id, execute_run, replay_config


def _cfg(**kw):
    data = {
        "rounds": 3,
        "rank": 4,
        "task": {"m": 5, "n": 4, "true_rank": 1, "sample_count": 60, "holdout_count": 10},
        "clients": {"count": 2, "local_steps": 2, "ranks": {"kind": "uniform", "ratio": 0.5}},
    }
    data.update(kw)
    return validate_config(data)


def _row(t: int) -> RoundMetrics:
    return RoundMetrics(round=t, train_loss=0.1 * t, eval_loss=1.0 / t, grad_norm=0.5, uplink_bytes=10, downlink_bytes=20, participants=2)


def test_downsample_keeps_last_point() -> None:
    pts = [CurvePoint(round=i, value=float(i)) for i in range(1, 11)]
    out = _downsample(pts, 4)
    assert out[0].round == 1
    assert out[-1].round == 10
    assert len(out) <= 5
    assert _downsample(pts, 0) == pts


def test_metrics_writer_flushes_each_row(tmp_path) -> None:
    path = tmp_path / "metrics.csv"
    with MetricsWriter(path) as w:
        w.write(_row(1))
        rows = list(csv.DictReader(path.open(encoding="utf-8", newline="")))
        assert len(rows) == 1
        w.write(_row(2))
    assert list(rows[0]) == list(RoundMetrics.CSV_FIELDS)
    loaded = load_metrics(tmp_path)
    assert loaded[1]["eval_loss"] == 0.5
    assert loaded[1]["uplink_bytes"] == 10


def test_snapshot_bytes_are_deterministic(tmp_path) -> None:
    b = np.arange(6.0).reshape(2, 3)
    save_snapshot(tmp_path / "a.npz", b=b, a=b.T)
    save_snapshot(tmp_path / "b.npz", a=b.T, b=b)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = load_snapshot(tmp_path / "a.npz")
    assert np.array_equal(back["b"], b)


def test_loaders_are_tolerant(tmp_path) -> None:
    assert load_manifest(tmp_path) is None
    (tmp_path / "manifest.json").write_text("{oops", encoding="utf-8")
    assert load_manifest(tmp_path) is None
    assert load_metrics(tmp_path) is None
    assert load_snapshot(tmp_path / "none.npz") is None
    (tmp_path / "bad.npz").write_bytes(b"junk")
    assert load_snapshot(tmp_path / "bad.npz") is None


def test_execute_run_writes_three_artifacts(tmp_path) -> None:
    out = execute_run(_cfg(), root=tmp_path, run_id="one")
    names = sorted(p.name for p in out.directory.iterdir())
    assert names == ["adapters.npz", "manifest.json", "metrics.csv"]
    m = load_manifest(out.directory)
    assert m.status == "completed"
    assert m.rounds_completed == 3
    assert m.base_checksum_start == m.base_checksum_end
    assert set(m.input_hashes) == {"config", "w0", "w_star", "train"}
    snap = load_snapshot(out.directory / "adapters.npz")
    assert snap["b"].shape == (5, 4)


def test_replayed_run_is_byte_identical(tmp_path) -> None:
    first = execute_run(_cfg(seed=7), root=tmp_path / "a", run_id="r")
    cfg = replay_config(load_manifest(first.directory))
    second = execute_run(cfg, root=tmp_path / "b", run_id="r")
    for name in ("metrics.csv", "adapters.npz"):
        assert (first.directory / name).read_bytes() == (second.directory / name).read_bytes()


def test_baseline_runs_share_the_metrics_schema(tmp_path) -> None:
    fs = execute_run(_cfg(), root=tmp_path, run_id="fs")
    flex = execute_run(_cfg(method="flexlora"), root=tmp_path, run_id="flex")
    header = lambda d: (d / "metrics.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header(fs.directory) == header(flex.directory)


def test_failed_run_keeps_finished_rows(tmp_path, monkeypatch) -> None:
    import fslora.federation as federation

    real = federation.run_round
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NumericalError("client 0 diverged", round=2, step=0)
        return real(*args, **kwargs)

    monkeypatch.setattr(federation, "run_round", flaky)
    with pytest.raises(NumericalError):
        execute_run(_cfg(), root=tmp_path, run_id="bad")
    d = tmp_path / "bad"
    m = load_manifest(d)
    assert m.status == "failed"
    assert m.rounds_completed == 2
    assert "diverged" in m.error
    assert len(load_metrics(d)) == 2
    assert not (d / "adapters.npz").exists()


def test_list_runs_and_curve_use_runs_dir(runs_root) -> None:
    cfg = _cfg(rounds=5)
    rid = default_run_id(cfg)
    execute_run(cfg, run_id=rid)
    (runs_root / "junk").mkdir()
    runs = list_runs()
    assert [r.run_id for r in runs] == [rid]
    curve = load_curve(artifacts.run_dir(rid), max_points=2)
    assert curve[-1].round == 5


def test_manifest_json_is_utf8(tmp_path) -> None:
    m = RunManifest(run_id="x", method="fslora", config={"note": "µ"}, master_seed=0)
    save_manifest(m, tmp_path)
    raw = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert raw["config"]["note"] == "µ"
    assert load_manifest(tmp_path) == m


def test_top_k_runs_record_pinned_tolerances(tmp_path) -> None:
    from fslora.runner import THRESHOLD_FRACTION, TOPK_LOSS_FACTOR

    plain = execute_run(_cfg(), root=tmp_path, run_id="plain")
    assert plain.manifest.notes == {}
    out = execute_run(_cfg(topk_ratio=0.5), root=tmp_path, run_id="topk")
    notes = load_manifest(out.directory).notes
    assert notes == {"topk_loss_factor": TOPK_LOSS_FACTOR, "threshold_fraction": THRESHOLD_FRACTION}
