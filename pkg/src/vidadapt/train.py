"""Two-phase toy training: base denoiser from scratch, then the adapter set
(low-rank factors, unshared projection, shared tokens) with the gated
temporal loss."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from vidadapt.adapter import LossWeights, diffusion_loss, is_active, temporal_loss, total_loss
from vidadapt.config import RunConfig
from vidadapt.pipeline import ControlSignal, FrameClip, ToyParts, concat_latents, noise_pair
from vidadapt.schedule import NoiseSpec, noise_mix, sample_noise
from vidadapt.synthetic import SyntheticClip, clip_set
from vidadapt.tokens import TrainState, gate_on, sgd_update

log = logging.getLogger(__name__)

TRAIN_SEED_OFFSET = 10_000


class TrainingError(RuntimeError):
    pass


def warmup_lr(iteration: int, lr: float, warmup: int) -> float:
    """Linear ramp from 0 to ``lr`` over ``warmup`` iterations, then flat."""
    if warmup <= 0:
        return lr
    return lr * min(1.0, iteration / warmup)


@dataclass
class LossCurve:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)

    def phase(self, name: str) -> list[dict]:
        return [r for r in self.rows if r["phase"] == name]

    def temporal(self) -> np.ndarray:
        """Adapter-phase temporal loss per iteration (NaN where gated off)."""
        return np.array([r["temporal"] if r["gate"] else np.nan for r in self.phase("adapter")], dtype=float)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = ["phase", "iteration", "t", "gate", "lr", "loss", "mse", "temporal"]
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, keys, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in keys})


def gated_mean(values: np.ndarray, lo: int, hi: int) -> float:
    """Mean of the non-NaN entries for 1-indexed iterations ``lo..hi``."""
    window = values[max(lo - 1, 0) : hi]
    window = window[~np.isnan(window)]
    if window.size == 0:
        raise ValueError(f"no gated-on iterations in [{lo}, {hi}]")
    return float(window.mean())


def temporal_drop(curve: LossCurve, window: int = 100) -> tuple[float, float]:
    """(step-``window`` moving average, moving average over the final ``window``)."""
    v = curve.temporal()
    return gated_mean(v, 1, window), gated_mean(v, len(v) - window + 1, len(v))


def training_clips(cfg: RunConfig) -> list[SyntheticClip]:
    seeds = [TRAIN_SEED_OFFSET + cfg.seed * 1000 + i for i in range(cfg.train_clips)]
    return clip_set(seeds, n_frames=cfg.frames, size=cfg.size, texture_noise=0.0)


def as_frame_clip(c: SyntheticClip, clean: bool = False) -> FrameClip:
    return FrameClip(c.clean if clean else c.frames, ControlSignal(c.edges, "edge"), clip_id=f"seed{c.seed}")


def train_base(parts: ToyParts, cfg: RunConfig, clips: Sequence[SyntheticClip], curve: LossCurve):
    """Plain noise-prediction training of every base denoiser weight.

    Each micro-batch holds ``base_batch_pairs`` adjacent-frame pairs noised
    independently and stacked as (a, b, a, b); the repeated half sees the
    unconditional embedding.
    """
    den = parts.denoiser
    params = {k: p for k, p in den.named_parameters()}
    state = TrainState(params, lr=cfg.base_lr, betas=(cfg.adam_beta1, cfg.adam_beta2), mode=cfg.optimizer)
    rng = np.random.default_rng(cfg.seed + 101)
    s = parts.schedule
    for it in range(1, cfg.base_steps + 1):
        xs, eps, ts, ctrls, conds = [], [], [], [], []
        for _ in range(cfg.base_batch_pairs):
            c = clips[rng.integers(len(clips))]
            k = int(rng.integers(c.clean.shape[0] - 1))
            t = int(rng.integers(1, s.T_total + 1))
            pair = c.clean[k : k + 2]
            z = parts.codec.encode(pair)
            seeds = tuple(int(v) for v in rng.integers(0, 2**62, size=2))
            x_a, x_b, n_a, n_b = noise_pair(z[:1], z[1:], t, s, seeds)
            xs.append(concat_latents(x_a, x_b))
            eps.append(concat_latents(n_a, n_b))
            ts += [t] * 4
            ctrl = c.edges[k : k + 2] if cfg.use_controls else torch.zeros_like(c.edges[k : k + 2])
            ctrls.append(torch.cat([ctrl, ctrl]))
            with torch.no_grad():
                cond = parts.conditioning(pair, c.prompt).rows
                unc = parts.conditioning(pair, c.prompt, unconditional=True).rows
            conds.append(torch.cat([cond, unc]))
        x = torch.cat(xs)
        target = torch.cat(eps)
        pred = den(x, torch.tensor(ts), conditioning=torch.cat(conds), control=torch.cat(ctrls))
        loss = diffusion_loss(target, pred)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite base loss at iteration {it}")
        grads = torch.autograd.grad(loss, list(params.values()))
        sgd_update(state, dict(zip(params, grads)))
        curve.add(phase="base", iteration=it, t=-1, gate=False, lr=cfg.base_lr, loss=loss.item(), mse=loss.item(), temporal=float("nan"))
    parts.trained = True


def train_adapter(parts: ToyParts, cfg: RunConfig, clips: Sequence[SyntheticClip], curve: LossCurve) -> TrainState:
    """Adapter-phase loop.

    One clip per iteration, every frame noised to the same ``t`` with its
    own seed. Adapters and the temporal term are live only inside the
    training window; updates land every ``grad_accum`` iterations with a
    linearly warmed-up learning rate.
    """
    den = parts.denoiser
    theta = parts.thetas()
    for p in theta.values():
        p.requires_grad_(True)
    frozen = {f"denoiser.{k}": p for k, p in den.named_parameters() if "lora_" not in k}
    frozen.update({f"vision.{k}": p for k, p in parts.vision.named_parameters()})
    state = TrainState(
        theta, frozen, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
        weight_decay=cfg.weight_decay, mode=cfg.optimizer,
    )
    train_w, _ = cfg.windows()
    weights = cfg.loss_weights()
    s = parts.schedule
    rng = np.random.default_rng(cfg.seed + 202)
    grads = {k: torch.zeros_like(p) for k, p in theta.items()}
    for it in range(1, cfg.steps + 1):
        c = clips[rng.integers(len(clips))]
        t = int(rng.integers(1, s.T_total + 1))
        z = parts.codec.encode(c.clean)
        eps = torch.stack([
            sample_noise(z.shape[1:], NoiseSpec(seed=int(v)), z.dtype)
            for v in rng.integers(0, 2**62, size=z.shape[0])
        ])
        x = noise_mix(z, eps, s.alpha_bar(t))
        den.set_adapters_active(is_active(t, s.T_total, train_w))
        cond = parts.conditioning(c.clean, c.prompt)
        ctrl = c.edges if cfg.use_controls else None
        pred, feats = den(x, t, conditioning=cond, control=ctrl, return_features=True)
        den.set_adapters_active(True)
        mse = diffusion_loss(eps, pred)
        lt = temporal_loss(feats)
        gate = gate_on(t, s.T_total, train_w.lo)
        loss = total_loss(lt if gate else 0.0, mse, weights)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite adapter loss at iteration {it} (t={t})")
        g = torch.autograd.grad(loss / cfg.grad_accum, list(theta.values()), allow_unused=True)
        for k, gi in zip(theta, g):
            if gi is not None:
                grads[k] += gi
        lr = warmup_lr(it, cfg.lr, cfg.warmup_steps)
        if it % cfg.grad_accum == 0:
            sgd_update(state, grads, lr=lr)
            for v in grads.values():
                v.zero_()
        curve.add(
            phase="adapter", iteration=it, t=t, gate=gate, lr=lr,
            loss=loss.item(), mse=mse.item(), temporal=lt.item(),
        )
    for p in theta.values():
        p.requires_grad_(False)
    return state


@dataclass
class TrainResult:
    parts: ToyParts
    curve: LossCurve
    seconds: float
    checkpoint: Optional[Path] = None


def train_driver(cfg: RunConfig, out_dir=None, parts: Optional[ToyParts] = None) -> TrainResult:
    """Train from scratch (or continue from ``parts``) and write the
    checkpoint, loss curve and resolved config into ``out_dir``."""
    start = time.perf_counter()
    torch.manual_seed(cfg.seed)
    clips = training_clips(cfg)
    curve = LossCurve()
    from_scratch = parts is None
    if from_scratch:
        parts = ToyParts.build(cfg, with_adapters=False)
        for p in parts.prompt.parameters():
            p.requires_grad_(False)
        train_base(parts, cfg, clips, curve)
        for p in parts.denoiser.parameters():
            p.requires_grad_(False)
        parts.denoiser.attach_adapters(cfg.lora_rank, seed=cfg.seed + 7)
    train_adapter(parts, cfg, clips, curve)
    parts.trained = True
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(out_dir / "checkpoint.pt", parts, cfg, include_base=from_scratch)
        curve.write_csv(out_dir / "loss_curve.csv")
        (out_dir / "config.txt").write_text(cfg.to_text())
    return TrainResult(parts, curve, time.perf_counter() - start, ckpt)


def save_checkpoint(path, parts: ToyParts, cfg: RunConfig, include_base: bool = True) -> Path:
    theta = {k: v.detach().clone() for k, v in parts.thetas().items()}
    payload = {"theta": theta, "config": cfg.to_text()}
    if include_base:
        payload["base"] = {f"denoiser.{k}": v.detach().clone() for k, v in parts.denoiser.state_dict().items() if "lora_" not in k}
    torch.save(payload, path)
    return Path(path)


def load_checkpoint(path, cfg: Optional[RunConfig] = None) -> tuple[ToyParts, RunConfig]:
    from vidadapt.config import parse_config

    payload = torch.load(path, weights_only=True)
    saved = parse_config(payload["config"])
    cfg = saved if cfg is None else cfg
    parts = ToyParts.build(saved, with_adapters=True)
    if "base" not in payload:
        raise TrainingError(f"{path} holds adapters only and no base weights")
    state = dict(parts.state())
    state.update(payload["base"])
    state.update(payload["theta"])
    parts.load_state(state)
    parts.prompt.unshare_boost = cfg.unshare_boost
    parts.prompt.drop_shared = cfg.drop_shared
    parts.prompt.drop_unshared = cfg.drop_unshared
    parts.trained = True
    return parts, cfg
