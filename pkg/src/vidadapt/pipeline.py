"""Clip-level plumbing: codecs, paired noising, batch stacking and the
encode -> invert -> resample -> decode edit loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from vidadapt.adapter import ActivationWindow, is_active
from vidadapt.bilateral import BilateralConfig, bilateral_filter
from vidadapt.config import RunConfig
from vidadapt.denoiser import ToyDenoiser
from vidadapt.schedule import (
    AnalyticGaussianDenoiser,
    NoiseSchedule,
    NoiseSpec,
    build_schedule,
    ddim_denoise_step,
    invert_fixed_point,
    noise_mix,
    sample_noise,
)
from vidadapt.tokens import ConditioningEmbedding, PromptLearner, ToyTextEncoder, ToyVisionEncoder, guided_step

Tensor = torch.Tensor

CONTROL_SOURCES = ("depth", "edge", "pose", "none")


class IdentityCodec:
    factor = 1
    # exact by construction
    roundtrip_bound = 0.0

    def encode(self, x: Tensor) -> Tensor:
        return x.clone()

    def decode(self, z: Tensor) -> Tensor:
        return z.clone()


class AvgPoolCodec:
    """2x average-pool encoder with nearest-neighbour decoder.

    Round-trip error is the within-block deviation from the block mean, so
    it is bounded by the largest intra-block pixel range.
    """

    # pixel range 2 times (n - 1) / n for n = 4 pixels per block
    roundtrip_bound = 1.5

    def __init__(self, factor: int = 2):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = factor

    def encode(self, x: Tensor) -> Tensor:
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {self.factor}")
        return F.avg_pool2d(x, self.factor)

    def decode(self, z: Tensor) -> Tensor:
        return F.interpolate(z, scale_factor=self.factor, mode="nearest")


def make_codec(name: str):
    if name == "identity":
        return IdentityCodec()
    if name == "avgpool":
        return AvgPoolCodec(2)
    raise ValueError(f"unknown codec {name!r}")


@dataclass
class ControlSignal:
    grid: Tensor  # (F, C_ctrl, h, w)
    source: str = "edge"

    def __post_init__(self):
        if self.source not in CONTROL_SOURCES:
            raise ValueError(f"control source must be one of {CONTROL_SOURCES}")
        if self.grid.ndim != 4:
            raise ValueError("control grid must be (frames, channels, h, w)")


@dataclass
class FrameClip:
    frames: Tensor  # (F, C, H, W)
    controls: Optional[ControlSignal] = None
    clip_id: str = "clip"

    def __post_init__(self):
        if isinstance(self.frames, (list, tuple)):
            shapes = {tuple(f.shape) for f in self.frames}
            if len(shapes) != 1:
                raise ValueError(f"frames differ in shape: {sorted(shapes)}")
            self.frames = torch.stack(list(self.frames))
        if self.frames.ndim != 4 or self.frames.shape[0] < 2:
            raise ValueError("a clip needs >= 2 frames of shape (C, H, W)")
        if self.controls is not None and self.controls.grid.shape[0] != self.frames.shape[0]:
            raise ValueError("one control grid per frame required")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def encode_clip(clip: FrameClip, codec) -> Tensor:
    """One latent per frame, stacked as ``(F, C, h, w)``."""
    z = codec.encode(clip.frames)
    if clip.controls is not None and clip.controls.grid.shape[-2:] != z.shape[-2:]:
        raise ValueError("control grid does not match latent resolution")
    return z


def noise_pair(z_a: Tensor, z_b: Tensor, t: int, schedule: NoiseSchedule, seeds: tuple[int, int]):
    """Like ``paired_noise`` but also returns the two noise draws."""
    if z_a.shape != z_b.shape:
        raise ValueError("paired latents must share a shape")
    seed_a, seed_b = seeds
    if seed_a == seed_b:
        raise ValueError("paired noise needs two distinct seed streams")
    abar = schedule.alpha_bar(schedule.check_t(t, allow_zero=True))
    n_a = sample_noise(z_a.shape, NoiseSpec(seed=seed_a), z_a.dtype)
    n_b = sample_noise(z_b.shape, NoiseSpec(seed=seed_b), z_b.dtype)
    return noise_mix(z_a, n_a, abar), noise_mix(z_b, n_b, abar), n_a, n_b


def paired_noise(z_a: Tensor, z_b: Tensor, t: int, schedule: NoiseSchedule, seeds: tuple[int, int]):
    """Noise two frames to the same ``t`` with independent draws."""
    x_a, x_b, _, _ = noise_pair(z_a, z_b, t, schedule, seeds)
    return x_a, x_b


def concat_latents(x_a: Tensor, x_b: Tensor) -> Tensor:
    """Batch-axis stack ``(a, b, a, b)``; the repeated pair carries the
    unconditional branch."""
    if x_a.shape != x_b.shape:
        raise ValueError(f"shape mismatch {tuple(x_a.shape)} vs {tuple(x_b.shape)}")
    return torch.cat([x_a, x_b, x_a, x_b], dim=0)


def unstack_latents(stacked: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    if stacked.shape[0] % 4:
        raise ValueError("stacked batch must be a multiple of 4")
    return tuple(stacked.chunk(4, dim=0))


@dataclass
class ToyParts:
    """Everything an edit needs besides the clip itself."""

    denoiser: ToyDenoiser
    prompt: PromptLearner
    vision: ToyVisionEncoder
    text: ToyTextEncoder
    codec: object
    schedule: NoiseSchedule
    trained: bool = False

    @classmethod
    def build(cls, cfg: RunConfig, with_adapters: bool = True) -> "ToyParts":
        den = ToyDenoiser(width=cfg.width, cond_dim=cfg.d_model, seed=cfg.seed, inject_features=cfg.inject_features)
        if with_adapters:
            den.attach_adapters(cfg.lora_rank, seed=cfg.seed + 7)
        prompt = PromptLearner(
            d=cfg.d_model,
            n_share=cfg.n_share,
            seed=cfg.seed + 11,
            unshare_boost=cfg.unshare_boost,
            drop_shared=cfg.drop_shared,
            drop_unshared=cfg.drop_unshared,
        )
        return cls(
            denoiser=den,
            prompt=prompt,
            vision=ToyVisionEncoder(d=cfg.d_model),
            text=ToyTextEncoder(d=cfg.d_model, length=cfg.toy_text_len),
            codec=make_codec(cfg.codec),
            schedule=build_schedule(cfg.t_total, cfg.beta_min, cfg.beta_max),
        )

    def conditioning(self, frames: Tensor, prompt: str, unconditional: bool = False) -> ConditioningEmbedding:
        """Per-frame rows ``(F, L, d)``. The unconditional variant puts the empty
        prompt in the conditional slot as well."""
        H = self.vision(frames)
        uncond = self.text("")
        cond = uncond if unconditional else self.text(prompt)
        return self.prompt(H, cond, uncond)

    def thetas(self) -> dict[str, Tensor]:
        """The trainable set: adapter factors, unshared projection, shared tokens."""
        out = {f"denoiser.{k}": v for k, v in self.denoiser.named_parameters() if "lora_" in k}
        out["prompt.T_share"] = self.prompt.T_share
        out["prompt.W_unshare"] = self.prompt.W_unshare
        return out

    def state(self) -> dict[str, Tensor]:
        st = {f"denoiser.{k}": v.detach().clone() for k, v in self.denoiser.state_dict().items()}
        st.update({f"prompt.{k}": v.detach().clone() for k, v in self.prompt.state_dict().items()})
        return st

    def load_state(self, st: dict[str, Tensor]):
        den = {k[len("denoiser."):]: v for k, v in st.items() if k.startswith("denoiser.")}
        pr = {k[len("prompt."):]: v for k, v in st.items() if k.startswith("prompt.")}
        self.denoiser.load_state_dict(den, strict=True)
        self.prompt.load_state_dict(pr, strict=True)

    def configure_adapters(self, merge_ratio: Optional[float] = None, scale: float = 1.0):
        for layer in self.denoiser.adapters:
            layer.unmerge()
            layer.scale = scale
            if merge_ratio is not None:
                layer.merge(merge_ratio)


class GatedDenoiser:
    """Wraps a module with adapters and switches them on only inside the
    activation window."""

    def __init__(self, module: ToyDenoiser, window: Optional[ActivationWindow], T_total: int):
        self.module = module
        self.window = window
        self.T_total = T_total
        self.log: list[tuple[int, bool]] = []

    def active_at(self, t: int) -> bool:
        return self.window is not None and is_active(t, self.T_total, self.window)

    def __call__(self, x, t, conditioning=None, control=None):
        on = self.active_at(int(t))
        self.log.append((int(t), on))
        self.module.set_adapters_active(on)
        try:
            return self.module(x, t, conditioning=conditioning, control=control)
        finally:
            self.module.set_adapters_active(True)


@dataclass
class StepRecord:
    t: int
    t_prev: int
    adapters_on: bool
    latents: Tensor


def _window_flag(den, t: int) -> bool:
    return den.active_at(t) if isinstance(den, GatedDenoiser) else False


def denoise_clip(
    latents: Tensor,
    denoiser,
    schedule: NoiseSchedule,
    n_steps: int,
    conditioning=None,
    controls: Optional[Tensor] = None,
    t_start: Optional[int] = None,
    bilateral: Optional[BilateralConfig] = None,
    guided_mode: str = "standard",
    records: Optional[list] = None,
) -> Tensor:
    """Deterministic reverse loop over all frames at once.

    ``bilateral`` filters the latent before every step where the config
    applies; the noise estimate is taken on the filtered latent.
    """
    if isinstance(denoiser, (ToyDenoiser, GatedDenoiser)) and conditioning is None:
        raise ValueError("cross-attention denoiser needs conditioning")
    grid = schedule.timesteps(n_steps, t_start)
    x = latents
    for t_prev, t in reversed(list(zip(grid, grid[1:]))):
        if bilateral is not None and bilateral.applies_at(t, schedule.T_total):
            x = bilateral_filter(x, bilateral)
        if guided_mode == "paper":
            a = schedule.alpha_bar(t) / schedule.alpha_bar(t_prev)
            coeff = (1.0 - a) / math.sqrt(1.0 - schedule.alpha_bar(t))
            g = lambda xx, tt, conditioning=None: denoiser(xx, tt, conditioning=conditioning, control=controls)
            x = guided_step(x, conditioning, coeff, g, t, mode="paper")
        else:
            eps = denoiser(x, t, conditioning=conditioning, control=controls)
            x = ddim_denoise_step(x, eps, t, schedule, t_prev=t_prev)
        if records is not None:
            records.append(StepRecord(t, t_prev, _window_flag(denoiser, t), x.detach().clone()))
    return x


def invert_latents(
    latents: Tensor,
    denoiser,
    schedule: NoiseSchedule,
    n_steps: int,
    t_end: Optional[int] = None,
    conditioning=None,
    controls: Optional[Tensor] = None,
    fixed_point_iters: int = 0,
    bilateral: Optional[BilateralConfig] = None,
) -> Tensor:
    """Batched inversion to ``t_end``; optionally filters before each step."""
    grid = schedule.timesteps(n_steps, t_end)
    x = latents
    for t_prev, t in zip(grid, grid[1:]):
        if bilateral is not None and bilateral.applies_at(max(t_prev, 1), schedule.T_total):
            x = bilateral_filter(x, bilateral)
        x = invert_fixed_point(x, denoiser, t, t_prev, schedule, fixed_point_iters, conditioning, controls)
    return x


@dataclass
class EditResult:
    frames: Tensor
    latents: Tensor
    inverted: Tensor
    records: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


def clip_controls(clip: FrameClip, cfg: RunConfig) -> Optional[Tensor]:
    if not cfg.use_controls or clip.controls is None:
        return None
    return clip.controls.grid


def make_denoiser(parts: ToyParts, cfg: RunConfig, latents: Tensor):
    if cfg.denoiser == "oracle":
        # data prior fitted to the clip itself: per-channel mean, fixed variance
        mean = latents.mean(dim=(0, 2, 3), keepdim=True)
        return AnalyticGaussianDenoiser(mean, cfg.oracle_var, parts.schedule)
    if not parts.trained:
        raise RuntimeError("untrained denoiser: train an adapter first or pass --denoiser oracle")
    _, infer = cfg.windows()
    window = infer if cfg.use_adapter else None
    return GatedDenoiser(parts.denoiser, window, parts.schedule.T_total)


def edit_clip(
    clip: FrameClip,
    parts: ToyParts,
    cfg: RunConfig,
    prompt: Optional[str] = None,
    out_dir: Optional[Path] = None,
    filtered: bool = True,
) -> EditResult:
    """encode -> (filtered) invert -> (filtered) resample -> decode.

    ``filtered=False`` or ``kernel_size == 1`` gives the plain round trip.
    The filter runs in the resampling loop for direction ``paper`` and in the
    inversion loop for ``roundtrip``.
    """
    from vidadapt.io import write_manifest

    prompt = cfg.prompt if prompt is None else prompt
    s = parts.schedule
    z0 = encode_clip(clip, parts.codec)
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    z0 = z0.to(dtype)
    ctrl = clip_controls(clip, cfg)
    ctrl = None if ctrl is None else ctrl.to(dtype)

    if cfg.denoiser == "trained":
        parts.denoiser.to(dtype)
        parts.prompt.to(dtype)
        parts.configure_adapters(cfg.merge_ratio, cfg.adapter_scale)
    d = make_denoiser(parts, cfg, z0)
    with torch.no_grad():
        cond = parts.conditioning(clip.frames.to(dtype), prompt) if cfg.denoiser == "trained" else None
        bil = cfg.bilateral() if filtered else None
        if bil is not None and bil.identity:
            bil = None
        t_end = max(1, int(round(cfg.strength * s.T_total)))
        inv_filter = bil if cfg.filter_direction == "roundtrip" else None
        smp_filter = bil if cfg.filter_direction == "paper" else None
        x_T = invert_latents(
            z0, d, s, cfg.invert_steps, t_end, cond, ctrl,
            fixed_point_iters=cfg.fixed_point_iters, bilateral=inv_filter,
        )
        records: list[StepRecord] = []
        z_hat = denoise_clip(
            x_T, d, s, cfg.invert_steps, cond, ctrl, t_start=t_end,
            bilateral=smp_filter, guided_mode=cfg.guided_mode, records=records,
        )
        frames = parts.codec.decode(z_hat)

    manifest = {}
    if out_dir is not None:
        weights = parts.state() if cfg.denoiser == "trained" else None
        manifest = write_manifest(
            Path(out_dir) / "manifest.json", cfg.to_text(), cfg.seeds, weights,
            extra={"clip_id": clip.clip_id, "prompt": prompt, "filtered": bil is not None},
        )
    return EditResult(frames=frames, latents=z_hat, inverted=x_T, records=records, manifest=manifest)
