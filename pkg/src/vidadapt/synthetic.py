"""Procedural moving-shape clips with known motion and analytic edge maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

COLORS = {
    "red": (0.9, -0.6, -0.6),
    "green": (-0.6, 0.8, -0.5),
    "blue": (-0.6, -0.4, 0.9),
    "yellow": (0.9, 0.8, -0.7),
    "white": (0.9, 0.9, 0.9),
}
SHAPES = ("square", "circle")


@dataclass
class SyntheticClip:
    frames: torch.Tensor  # (F, 3, H, W), clean + per-frame texture noise, in [-1, 1]-ish
    clean: torch.Tensor  # (F, 3, H, W)
    edges: torch.Tensor  # (F, 1, H // 2, W // 2)
    prompt: str
    velocity: tuple[float, float]
    seed: int


def _mask(shape: str, cy: float, cx: float, r: float, size: int, supersample: int = 4) -> np.ndarray:
    n = size * supersample
    coords = (np.arange(n) + 0.5) / supersample
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    if shape == "square":
        m = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    else:
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return m.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def edge_map(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    """Gradient magnitude of the coverage mask at latent resolution."""
    m = mask.reshape(mask.shape[0] // factor, factor, mask.shape[1] // factor, factor).mean(axis=(1, 3))
    gy, gx = np.gradient(m)
    return np.hypot(gy, gx)


def moving_shape_clip(
    seed: int,
    n_frames: int = 8,
    size: int = 32,
    texture_noise: float = 0.1,
    speed: float = 1.5,
) -> SyntheticClip:
    rng = np.random.default_rng(seed)
    shape = SHAPES[rng.integers(len(SHAPES))]
    color_name = list(COLORS)[rng.integers(len(COLORS))]
    color = np.array(COLORS[color_name])
    r = rng.uniform(0.16, 0.24) * size
    angle = rng.uniform(0, 2 * np.pi)
    vy, vx = speed * np.sin(angle), speed * np.cos(angle)
    travel = np.array([vy, vx]) * (n_frames - 1)
    lo = r + 1 + np.maximum(-travel, 0)
    hi = size - r - 1 - np.maximum(travel, 0)
    cy, cx = rng.uniform(lo[0], max(lo[0], hi[0])), rng.uniform(lo[1], max(lo[1], hi[1]))
    bg_top = rng.uniform(-0.8, -0.2, size=3)
    bg_bottom = rng.uniform(-0.8, -0.2, size=3)
    ramp = np.linspace(0, 1, size)[:, None, None]
    background = (bg_top * (1 - ramp) + bg_bottom * ramp).transpose(2, 0, 1)
    background = np.broadcast_to(background, (3, size, size))

    clean, edges = [], []
    for k in range(n_frames):
        m = _mask(shape, cy + vy * k, cx + vx * k, r, size)
        frame = background * (1 - m) + color[:, None, None] * m
        clean.append(frame)
        edges.append(edge_map(m)[None])
    clean = np.stack(clean)
    noise = texture_noise * rng.standard_normal(clean.shape)
    direction = ("down" if vy > 0 else "up") if abs(vy) > abs(vx) else ("right" if vx > 0 else "left")
    return SyntheticClip(
        frames=torch.tensor(clean + noise, dtype=torch.float32),
        clean=torch.tensor(clean, dtype=torch.float32),
        edges=torch.tensor(np.stack(edges), dtype=torch.float32),
        prompt=f"a {color_name} {shape} moving {direction}",
        velocity=(float(vy), float(vx)),
        seed=seed,
    )


def clip_set(seeds, **kwargs) -> list[SyntheticClip]:
    return [moving_shape_clip(s, **kwargs) for s in seeds]


def downsample(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    return F.avg_pool2d(x, factor)
