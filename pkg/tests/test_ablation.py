import csv
import io

import pytest
import torch

from vidadapt.ablation import (
    PRESETS,
    TOKEN_COUNTS,
    TrainingCache,
    eval_clips,
    preset_points,
    run_sweep,
    summary_table,
    window_points,
)
from vidadapt.config import ConfigError, RunConfig, parse_config
from vidadapt.metrics import MetricReport, read_report_csv
from vidadapt.pipeline import ToyParts

FAST = dict(eval_clips=2, frames=3, width=16, d_model=32, n_share=4, fixed_point_iters=1, invert_steps=3)


def fake_trainer(cfg):
    parts = ToyParts.build(cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        for layer in parts.denoiser.adapters:
            layer.lora_B.copy_(0.1 * torch.randn(layer.lora_B.shape, generator=g))
    parts.trained = True
    return parts


def test_preset_sizes():
    assert len(preset_points("kernel")) == 9
    pts = window_points()
    assert len(pts) == 6
    assert {"train_window": "0.8,1", "infer_window": "0.9,1"} in pts
    assert {"train_window": "0.9,1", "infer_window": "0.5,1"} not in pts
    assert [p["n_share"] for p in preset_points("tokens")] == list(TOKEN_COUNTS)
    assert len(preset_points("token-modes")) == 3
    assert set(PRESETS) == {"kernel", "window", "tokens", "token-modes"}
    with pytest.raises(ConfigError):
        preset_points("nope")


def test_summary_best_flags_and_ties():
    reps = []
    for p, f in ((10.0, 0.3), (12.0, 0.1), (12.0, 0.2)):
        r = MetricReport(["psnr", "flicker"])
        r.add("a", psnr=p, flicker=f)
        reps.append(r)
    text, best = summary_table([{"k": 1}, {"k": 3}, {"k": 5}], reps)
    assert best == {"psnr": 1, "flicker": 1}
    assert text.splitlines()[0] == "point,k,psnr,flicker,best_psnr,best_flicker"
    assert text.splitlines()[2].endswith(",1,1")


def _check_sweep_dir(out, n_points):
    summary = list(csv.reader(io.StringIO((out / "summary.csv").read_text())))
    assert len(summary) == n_points + 1
    header = summary[0]
    for i in range(n_points):
        per_clip = (out / f"point_{i:03d}" / "per_clip.csv").read_text()
        rows, agg = read_report_csv(per_clip)
        assert len(rows) == 2
        row = dict(zip(header, summary[i + 1]))
        for m, v in agg.items():
            recomputed = sum(r[m] for r in rows) / len(rows)
            assert abs(recomputed - v) <= 1e-9
            assert float(row[m]) == v
        assert (out / f"point_{i:03d}" / "manifest.json").exists()
    assert (out / "summary.png").stat().st_size > 0


@pytest.mark.parametrize("preset,n,trainings", [("kernel", 9, 1), ("window", 6, 3), ("tokens", 6, 6)])
def test_sweeps_complete_and_consistent(tmp_path, preset, n, trainings):
    cfg = RunConfig(mode="ablate", **FAST)
    cache = TrainingCache(fake_trainer)
    res = run_sweep(cfg, preset_points(preset), tmp_path, cache)
    assert len(res.reports) == n and cache.trainings == trainings
    _check_sweep_dir(tmp_path, n)


def test_sweep_reproducible_from_manifest_and_jobs(tmp_path):
    cfg = RunConfig(mode="ablate", **FAST)
    pts = preset_points("kernel")[:4]
    run_sweep(cfg, pts, tmp_path / "a", TrainingCache(fake_trainer))
    saved = parse_config((tmp_path / "a" / "config.txt").read_text())
    run_sweep(saved.replace(jobs=3), pts, tmp_path / "b", TrainingCache(fake_trainer))
    for name in ["summary.csv", *(f"point_{i:03d}/per_clip.csv" for i in range(4))]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_token_mode_points_apply(tmp_path):
    cfg = RunConfig(mode="ablate", **FAST)
    res = run_sweep(cfg, preset_points("token-modes"), None, TrainingCache(fake_trainer))
    assert [r.meta["point"]["token_mode"] for r in res.reports] == ["shared", "boosted-unshared", "removed-shared"]
    assert res.summary_csv.count("\n") == 4


def test_cache_persists_to_directory(tmp_path):
    cfg = RunConfig(**FAST)
    a = TrainingCache(fake_trainer, tmp_path)
    first = a.get(cfg)
    b = TrainingCache(fake_trainer, tmp_path)
    second = b.get(cfg)
    assert b.trainings == 0
    for k, v in first.state().items():
        assert torch.equal(second.state()[k], v)


def test_empty_grid_rejected():
    with pytest.raises(ConfigError):
        run_sweep(RunConfig(**FAST), [], None)


def test_eval_clips_seeded():
    cfg = RunConfig(**FAST)
    assert [c.seed for c in eval_clips(cfg)] == [0, 1]
