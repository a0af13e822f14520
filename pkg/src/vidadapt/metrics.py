"""Image and clip metrics, metric reports and the external-tool hook."""

from __future__ import annotations

import csv
import io
import logging
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
NA = "n/a"


def _pair(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def psnr(a, b, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP`` for identical
    inputs. The default peak matches frames stored in [-1, 1]."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    mse = float((a - b).pow(2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Separable Gaussian over the last two axes with symmetric padding."""
    r = (g.numel() - 1) // 2
    lead = x.shape[:-2]
    y = x.reshape(-1, 1, *x.shape[-2:])
    # 'reflect' in torch is mirror-without-edge; symmetric padding matches scipy's 'reflect'
    y = torch.cat([y[..., :, :r].flip(-1), y, y[..., :, -r:].flip(-1)], dim=-1)
    y = torch.cat([y[..., :r, :].flip(-2), y, y[..., -r:, :].flip(-2)], dim=-2)
    y = F.conv2d(y, g.view(1, 1, 1, -1))
    y = F.conv2d(y, g.view(1, 1, -1, 1))
    return y.reshape(*lead, *x.shape[-2:])


def ssim(a, b, data_range: float = 2.0, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with a Gaussian window, averaged over channels.

    Uses sample (N-1) covariance normalisation and crops the half-window
    border before averaging, the usual convention for Gaussian-weighted SSIM.
    Inputs are ``(..., H, W)``; leading axes are treated as channels.
    """
    a, b = _pair(a, b)
    if min(a.shape[-2:]) < win_size:
        raise ValueError(f"images must be at least {win_size} pixels on a side")
    g = gaussian_window(win_size, sigma)
    n = win_size * win_size
    cov_norm = n / (n - 1)
    mu_a, mu_b = _blur(a, g), _blur(b, g)
    vaa = cov_norm * (_blur(a * a, g) - mu_a * mu_a)
    vbb = cov_norm * (_blur(b * b, g) - mu_b * mu_b)
    vab = cov_norm * (_blur(a * b, g) - mu_a * mu_b)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * vab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (vaa + vbb + c2))
    r = (win_size - 1) // 2
    return float(s[..., r:-r, r:-r].mean())


def clip_ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 2.0) -> float:
    """Frame-averaged SSIM for ``(F, C, H, W)`` clips."""
    return float(np.mean([ssim(x, y, data_range) for x, y in zip(a, b)]))


def clip_psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 2.0) -> float:
    return psnr(a, b, peak)


def flicker_metric(clip) -> float:
    """Mean absolute difference between consecutive frames."""
    x = torch.as_tensor(clip, dtype=torch.float64)
    if x.ndim < 1 or x.shape[0] < 2:
        raise ValueError("flicker needs at least two frames")
    return float((x[1:] - x[:-1]).abs().flatten(1).mean(dim=1).mean())


def similarity_curve(clip) -> list[float]:
    """Cosine similarity of each consecutive frame pair (flattened)."""
    x = torch.as_tensor(clip, dtype=torch.float64).flatten(1)
    return [float(v) for v in F.cosine_similarity(x[1:], x[:-1], dim=1)]


def external_metric_hook(name: str, command: str, clip_paths: Sequence[str], timeout: float = 60.0):
    """Run ``command`` once per clip with ``{clip}`` substituted.

    The tool prints one float on stdout. Anything else becomes ``n/a`` for
    that clip. Returns ``(values, failures)``.
    """
    values: list = []
    failures = 0
    for i, path in enumerate(clip_paths):
        argv = shlex.split(command.replace("{clip}", shlex.quote(str(path))))
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout, check=False)
            lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
            if proc.returncode != 0 or len(lines) != 1:
                raise ValueError(f"exit {proc.returncode}, {len(lines)} output lines")
            v = float(lines[0])
            if not math.isfinite(v):
                raise ValueError("non-finite value")
            values.append(v)
        except (OSError, ValueError, subprocess.TimeoutExpired) as e:
            log.warning("metric %s: clip %d (%s) failed: %s", name, i, path, e)
            values.append(NA)
            failures += 1
    return values, failures


@dataclass
class MetricReport:
    """Per-clip rows plus one aggregate row per column.

    ``columns`` excludes the ``clip`` key. Cells may hold ``"n/a"``; the
    aggregate mean skips those cells.
    """

    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, clip: str, **values):
        missing = set(self.columns) - set(values)
        if missing:
            raise ValueError(f"row for {clip} lacks {sorted(missing)}")
        self.rows.append({"clip": clip, **{c: values[c] for c in self.columns}})

    def add_column(self, name: str, values: Sequence):
        if len(values) != len(self.rows):
            raise ValueError("one value per row required")
        self.columns.append(name)
        for r, v in zip(self.rows, values):
            r[name] = v

    def aggregate(self) -> dict:
        out = {}
        for c in self.columns:
            vals = [r[c] for r in self.rows if r[c] != NA]
            out[c] = float(np.mean(vals)) if vals else NA
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["clip", *self.columns])
        for r in self.rows:
            w.writerow([r["clip"], *(_cell(r[c]) for c in self.columns)])
        agg = self.aggregate()
        w.writerow(["mean", *(_cell(agg[c]) for c in self.columns)])
        return buf.getvalue()

    def render(self) -> str:
        header = ["clip", *self.columns]
        body = [[r["clip"], *(_short(r[c]) for c in self.columns)] for r in self.rows]
        agg = self.aggregate()
        body.append(["mean", *(_short(agg[c]) for c in self.columns)])
        widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
        fmt = "  ".join(f"{{:>{w}}}" for w in widths)
        lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*row) for row in body]
        return "\n".join(lines)


def _cell(v) -> str:
    return v if isinstance(v, str) else repr(float(v))


def _short(v) -> str:
    return v if isinstance(v, str) else f"{float(v):.4f}"


def read_report_csv(text: str) -> tuple[list[dict], dict]:
    """Parse ``to_csv`` output back into per-clip rows and the aggregate row."""
    reader = list(csv.reader(io.StringIO(text)))
    header, *body = reader
    conv = lambda v: v if v == NA else float(v)
    rows = [{"clip": r[0], **{h: conv(v) for h, v in zip(header[1:], r[1:])}} for r in body if r[0] != "mean"]
    (agg,) = [{h: conv(v) for h, v in zip(header[1:], r[1:])} for r in body if r[0] == "mean"]
    return rows, agg
