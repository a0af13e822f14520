"""Edge-preserving bilateral smoothing of latents and filtered DDIM inversion.

Every (batch, channel) plane is filtered on its own; the intensity term only
compares values inside that channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from vidadapt.schedule import (
    Denoiser,
    NoiseSchedule,
    ddim_denoise_step,
    ddim_invert_step,
)

Tensor = torch.Tensor

BOUNDARIES = ("reflect", "clamp")
DIRECTIONS = ("paper", "roundtrip")


@dataclass(frozen=True)
class BilateralConfig:
    kernel_size: int = 3
    sigma_spatial: float = 1.0
    sigma_intensity: float = 0.1
    boundary: str = "reflect"
    # steps with t / T_total above this fraction are left unfiltered
    max_t_fraction: float = 1.0

    def __post_init__(self):
        k = self.kernel_size
        if int(k) != k or k < 1 or k % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {k}")
        if not (self.sigma_spatial > 0 and self.sigma_intensity > 0):
            raise ValueError("sigmas must be positive")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")
        if not 0 <= self.max_t_fraction <= 1:
            raise ValueError("max_t_fraction must lie in [0, 1]")

    @property
    def identity(self) -> bool:
        return self.kernel_size == 1

    def applies_at(self, t: int, T_total: int) -> bool:
        return not self.identity and t / T_total <= self.max_t_fraction


def spatial_weight(x: Sequence[float], y: Sequence[float], sigma_spatial: float) -> float:
    d2 = sum((a - b) ** 2 for a, b in zip(x, y))
    return math.exp(-d2 / (2.0 * sigma_spatial**2))


def intensity_weight(I_x: float, I_y: float, sigma_intensity: float) -> float:
    return math.exp(-((I_x - I_y) ** 2) / (2.0 * sigma_intensity**2))


def boundary_index(idx: Tensor, n: int, boundary: str) -> Tensor:
    """Map arbitrary integer positions onto ``[0, n)``.

    ``reflect`` mirrors about the edge samples without repeating them
    (``... c b | a b c | b a ...``), for any overshoot.
    """
    if boundary == "clamp" or n == 1:
        return idx.clamp(0, n - 1)
    period = 2 * (n - 1)
    idx = idx.remainder(period)
    return torch.where(idx >= n, period - idx, idx)


def bilateral_filter(x: Tensor, cfg: BilateralConfig) -> Tensor:
    """Filter a ``(..., H, W)`` grid plane by plane.

    Computed as ``x + sum w (I_y - I_x) / sum w`` so constant planes are exact
    fixed points and constant shifts commute with the filter.
    """
    if not isinstance(cfg, BilateralConfig):
        raise TypeError("cfg must be a BilateralConfig")
    if x.ndim < 2:
        raise ValueError("need at least two spatial axes")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite values in input grid")
    if cfg.identity:
        return x.clone()
    r = cfg.kernel_size // 2
    H, W = x.shape[-2:]
    rows = torch.arange(H)
    cols = torch.arange(W)
    inv_s = 1.0 / (2.0 * cfg.sigma_spatial**2)
    inv_i = 1.0 / (2.0 * cfg.sigma_intensity**2)
    num = torch.zeros_like(x)
    den = torch.zeros_like(x)
    for dy in range(-r, r + 1):
        iy = boundary_index(rows + dy, H, cfg.boundary)
        for dx in range(-r, r + 1):
            ix = boundary_index(cols + dx, W, cfg.boundary)
            diff = x[..., iy[:, None], ix[None, :]] - x
            w = math.exp(-(dy * dy + dx * dx) * inv_s) * torch.exp(-(diff * diff) * inv_i)
            num += w * diff
            den += w
    return x + num / den


def plane_variance(x: Tensor) -> Tensor:
    """Per-plane population variance, shape ``x.shape[:-2]``."""
    return x.flatten(-2).var(dim=-1, unbiased=False)


def filtered_denoise_step(
    x_t: Tensor,
    t: int,
    s: NoiseSchedule,
    d: Denoiser,
    cfg: BilateralConfig,
    t_prev: Optional[int] = None,
    z: Optional[Tensor] = None,
    form: str = "ddim",
    conditioning=None,
    control=None,
) -> Tensor:
    """Reverse step taken from the filtered latent: both the update and the
    noise estimate see ``x_t' = filter(x_t)``."""
    xf = bilateral_filter(x_t, cfg) if cfg.applies_at(t, s.T_total) else x_t
    eps = d(xf, t, conditioning=conditioning, control=control)
    return ddim_denoise_step(xf, eps, t, s, z=z, t_prev=t_prev, form=form)


def filtered_invert_step(
    x_t: Tensor,
    t: int,
    s: NoiseSchedule,
    d: Denoiser,
    cfg: BilateralConfig,
    t_next: Optional[int] = None,
    fixed_point_iters: int = 0,
    conditioning=None,
    control=None,
) -> Tensor:
    """Noising-direction step ``x_t -> x_{t_next}`` applied to ``filter(x_t)``.

    With ``kernel_size == 1`` this is exactly the plain inversion step.
    """
    t_next = t + 1 if t_next is None else t_next
    if not t_next > t:
        raise ValueError("t_next must follow t")
    filt = cfg.applies_at(max(t, 1), s.T_total)
    xf = bilateral_filter(x_t, cfg) if filt else x_t
    eps = d(xf, t_next, conditioning=conditioning, control=control)
    out = ddim_invert_step(xf, eps, t_next, s, t_prev=t)
    for _ in range(fixed_point_iters):
        eps = d(out, t_next, conditioning=conditioning, control=control)
        out = ddim_invert_step(xf, eps, t_next, s, t_prev=t)
    return out


@dataclass
class InversionTrace:
    """Grid timesteps with the latent reached at each, and the filtered latent
    that seeded the following step."""

    timesteps: list[int]
    latents: list[Tensor] = field(default_factory=list)
    filtered: list[Tensor] = field(default_factory=list)
    var_before: list[float] = field(default_factory=list)
    var_after: list[float] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.latents[-1]


def invert_clip(
    latents: Sequence[Tensor],
    steps: int,
    s: NoiseSchedule,
    d: Denoiser,
    cfg: BilateralConfig,
    t_end: Optional[int] = None,
    fixed_point_iters: int = 0,
    conditioning: Optional[Sequence] = None,
    controls: Optional[Sequence] = None,
) -> list[InversionTrace]:
    """Filtered inversion of each frame on its own.

    ``conditioning`` / ``controls`` are optional per-frame sequences.
    """
    if len(latents) == 0:
        raise ValueError("empty clip")
    shape = latents[0].shape
    if any(z.shape != shape for z in latents):
        raise ValueError("all frames must share one shape")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    grid = s.timesteps(steps, t_end)
    traces = []
    for k, z0 in enumerate(latents):
        cond = None if conditioning is None else conditioning[k]
        ctrl = None if controls is None else controls[k]
        tr = InversionTrace(timesteps=list(grid), latents=[z0])
        x = z0
        for t, t_next in zip(grid, grid[1:]):
            xf = bilateral_filter(x, cfg) if cfg.applies_at(max(t, 1), s.T_total) else x
            tr.filtered.append(xf)
            tr.var_before.append(float(plane_variance(x).mean()))
            tr.var_after.append(float(plane_variance(xf).mean()))
            x = filtered_invert_step(
                x, t, s, d, cfg, t_next=t_next, fixed_point_iters=fixed_point_iters,
                conditioning=cond, control=ctrl,
            )
            tr.latents.append(x)
        traces.append(tr)
    return traces


def trace_distance(traces: Sequence[InversionTrace]) -> float:
    """Mean RMS gap between consecutive frames, averaged over trace steps."""
    if len(traces) < 2:
        return 0.0
    total = 0.0
    n = 0
    for a, b in zip(traces, traces[1:]):
        for xa, xb in zip(a.latents[1:], b.latents[1:]):
            total += float((xa - xb).pow(2).mean().sqrt())
            n += 1
    return total / n
