"""Grid sweeps over the edit pipeline with per-clip and summary reports."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from vidadapt.adapter import ActivationWindow
from vidadapt.config import ConfigError, RunConfig, expand_grid, format_value
from vidadapt.metrics import NA, MetricReport, clip_psnr, clip_ssim, external_metric_hook, flicker_metric, similarity_curve
from vidadapt.pipeline import FrameClip, ToyParts, edit_clip
from vidadapt.synthetic import SyntheticClip, clip_set

log = logging.getLogger(__name__)

METRICS = ("psnr", "ssim", "flicker", "similarity")
# larger is better for everything except flicker
HIGHER_IS_BETTER = {"psnr": True, "ssim": True, "flicker": False, "similarity": True}

KERNEL_STEP_AXES = {"kernel_size": [1, 3, 5], "invert_steps": [3, 4, 5]}
WINDOW_VALUES = (0.5, 0.8, 0.9)
TOKEN_COUNTS = (2, 4, 6, 8, 10, 18)
TOKEN_MODES = {
    "shared": {},
    "boosted-unshared": {"unshare_boost": 2.0},
    "removed-shared": {"drop_shared": True},
}


def window_points(values: Sequence[float] = WINDOW_VALUES) -> list[dict]:
    """Train/inference window starts with ``train <= infer``; both end at 1."""
    pts = []
    for tr in values:
        for inf in values:
            if tr <= inf:
                pts.append({"train_window": str(ActivationWindow(tr)), "infer_window": str(ActivationWindow(inf))})
    return pts


def preset_points(name: str) -> list[dict]:
    if name == "kernel":
        return expand_grid(KERNEL_STEP_AXES)
    if name == "window":
        return window_points()
    if name == "tokens":
        return [{"n_share": n} for n in TOKEN_COUNTS]
    if name == "token-modes":
        return [dict(mode_change, token_mode=m) for m, mode_change in TOKEN_MODES.items()]
    raise ConfigError(f"unknown preset sweep {name!r}")


PRESETS = ("kernel", "window", "tokens", "token-modes")


def eval_clips(cfg: RunConfig) -> list[SyntheticClip]:
    return clip_set(range(cfg.eval_clips), n_frames=cfg.frames, size=cfg.size, texture_noise=cfg.texture_noise)


def to_frame_clip(c: SyntheticClip) -> FrameClip:
    from vidadapt.pipeline import ControlSignal

    return FrameClip(c.frames, ControlSignal(c.edges, "edge"), clip_id=f"seed{c.seed}")


def evaluate(parts: Optional[ToyParts], cfg: RunConfig, clips: Sequence[SyntheticClip], filtered: bool = True, out_dir=None):
    """Edit each clip and score it against its clean frames.

    Returns the report and the edited frames, in clip order.
    """
    report = MetricReport(list(METRICS))
    edited = []
    for c in clips:
        fc = to_frame_clip(c)
        res = edit_clip(fc, parts, cfg, prompt=cfg.prompt or c.prompt, filtered=filtered)
        out = res.frames.float()
        edited.append(out)
        report.add(
            fc.clip_id,
            psnr=clip_psnr(out, c.clean),
            ssim=clip_ssim(out, c.clean),
            flicker=flicker_metric(out),
            similarity=float(np.mean(similarity_curve(out))),
        )
    if out_dir is not None and cfg.metric_hook:
        from vidadapt.io import save_frames

        dirs = []
        for fc_id, frames in zip(report.rows, edited):
            d = Path(out_dir) / "frames" / fc_id["clip"]
            save_frames(d, frames)
            dirs.append(str(d))
        vals, fails = external_metric_hook("external", cfg.metric_hook, dirs, cfg.hook_timeout)
        report.add_column("external", vals)
        report.meta["hook_failures"] = fails
    return report, edited


class TrainingCache:
    """Trained parts keyed by the config fields that affect training.

    Concurrent requests for the same key train once.
    """

    def __init__(self, trainer: Optional[Callable[[RunConfig], ToyParts]] = None, directory=None):
        self.trainer = trainer or _default_trainer
        self.directory = None if directory is None else Path(directory)
        self._parts: dict = {}
        self._locks: dict = {}
        self._guard = threading.Lock()
        self.trainings = 0

    @staticmethod
    def key_hash(cfg: RunConfig) -> str:
        text = "\n".join(f"{k}={format_value(v)}" for k, v in cfg.training_key())
        return hashlib.sha1(text.encode()).hexdigest()[:16]

    def get(self, cfg: RunConfig) -> ToyParts:
        key = cfg.training_key()
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._parts:
                self._parts[key] = self._load_or_train(cfg)
            return copy.deepcopy(self._parts[key])

    def _load_or_train(self, cfg: RunConfig) -> ToyParts:
        path = None
        if self.directory is not None:
            path = self.directory / f"{self.key_hash(cfg)}.pt"
            if path.exists():
                from vidadapt.train import load_checkpoint

                return load_checkpoint(path, cfg)[0]
        parts = self.trainer(cfg)
        self.trainings += 1
        if path is not None:
            from vidadapt.train import save_checkpoint

            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(path, parts, cfg)
        return parts


def _default_trainer(cfg: RunConfig) -> ToyParts:
    from vidadapt.train import train_driver

    return train_driver(cfg).parts


@dataclass
class SweepResult:
    points: list[dict]
    reports: list[MetricReport]
    summary_csv: str
    best: dict = field(default_factory=dict)
    hook_failures: int = 0


def _point_label(point: dict) -> str:
    return ";".join(f"{k}={format_value(v)}" for k, v in point.items())


def summary_table(points: Sequence[dict], reports: Sequence[MetricReport]) -> tuple[str, dict]:
    """One row per grid point: axis values, aggregate metrics, best flags."""
    axis_names: list[str] = []
    for p in points:
        for k in p:
            if k not in axis_names:
                axis_names.append(k)
    aggs = [r.aggregate() for r in reports]
    metrics = [m for m in reports[0].columns]
    best = {}
    for m in metrics:
        vals = [(a[m], i) for i, a in enumerate(aggs) if a[m] != NA]
        if not vals:
            continue
        sign = -1.0 if HIGHER_IS_BETTER.get(m, True) else 1.0
        # ties keep the first grid point
        best[m] = min(vals, key=lambda vi: (sign * vi[0], vi[1]))[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", *axis_names, *metrics, *(f"best_{m}" for m in metrics)])
    for i, (p, a) in enumerate(zip(points, aggs)):
        cells = [format_value(p.get(k, "")) for k in axis_names]
        vals = [a[m] if a[m] == NA else repr(a[m]) for m in metrics]
        flags = ["1" if best.get(m) == i else "0" for m in metrics]
        w.writerow([i, *cells, *vals, *flags])
    return buf.getvalue(), best


def _apply(cfg: RunConfig, point: dict) -> RunConfig:
    changes = {k: v for k, v in point.items() if k != "token_mode"}
    return cfg.replace(**changes)


def run_sweep(
    cfg: RunConfig,
    points: Sequence[dict],
    out_dir=None,
    cache: Optional[TrainingCache] = None,
    clips: Optional[Sequence[SyntheticClip]] = None,
) -> SweepResult:
    """Evaluate every grid point on the same seeded clips.

    Points run on up to ``cfg.jobs`` threads; results are assembled in grid
    order so reports do not depend on scheduling.
    """
    if not points:
        raise ConfigError("empty sweep grid")
    cache = cache or TrainingCache()
    clips = list(clips) if clips is not None else eval_clips(cfg)
    out_dir = None if out_dir is None else Path(out_dir)
    configs = [_apply(cfg, p) for p in points]

    def run_one(i: int) -> MetricReport:
        c = configs[i]
        parts = cache.get(c) if c.denoiser == "trained" else ToyParts.build(c)
        pdir = None if out_dir is None else out_dir / f"point_{i:03d}"
        report, _ = evaluate(parts, c, clips, filtered=True, out_dir=pdir)
        report.meta["point"] = points[i]
        if pdir is not None:
            from vidadapt.io import write_manifest

            pdir.mkdir(parents=True, exist_ok=True)
            (pdir / "per_clip.csv").write_text(report.to_csv())
            write_manifest(pdir / "manifest.json", c.to_text(), c.seeds, extra={"point": _point_label(points[i])})
        return report

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            reports = list(pool.map(run_one, range(len(points))))
    else:
        reports = [run_one(i) for i in range(len(points))]

    summary, best = summary_table(points, reports)
    fails = sum(r.meta.get("hook_failures", 0) for r in reports)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "summary.csv").write_text(summary)
        (out_dir / "config.txt").write_text(cfg.to_text())
        plot_summary(points, reports, out_dir / "summary.png")
    return SweepResult(list(points), reports, summary, best, fails)


def plot_summary(points: Sequence[dict], reports: Sequence[MetricReport], path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = reports[0].columns
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.2), squeeze=False)
    labels = [_point_label(p).replace(";", "\n") for p in points]
    for ax, m in zip(axes[0], metrics):
        vals = [r.aggregate()[m] for r in reports]
        vals = [np.nan if v == NA else v for v in vals]
        ax.bar(range(len(vals)), vals, color="tab:blue")
        ax.set_title(m)
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(labels, fontsize=5, rotation=90)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
