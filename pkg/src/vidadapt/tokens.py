"""Shared and frame-specific prompt tokens, conditioning assembly, cross-attention
and the adapter/token parameter update."""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch
import torch.nn as nn

from vidadapt.adapter import diffusion_loss
from vidadapt.schedule import NoiseSchedule, ddim_denoise_step

Tensor = torch.Tensor

SHARE_STD = 0.02
SEGMENTS = ("shared", "frame", "cond", "uncond")


def init_shared(N_share: int, d: int = 768, seed: int = 0, dtype=torch.float32) -> Tensor:
    """``N_share x d`` draws from N(0, 0.02^2)."""
    if N_share < 0 or d < 1:
        raise ValueError("bad token matrix size")
    gen = torch.Generator().manual_seed(int(seed))
    return (torch.randn(N_share, d, generator=gen, dtype=torch.float64) * SHARE_STD).to(dtype)


def pool_adjacent(H_vision: Tensor) -> Tensor:
    """Average token pairs ``(2i, 2i+1)`` along the sequence axis."""
    if H_vision.ndim != 3:
        raise ValueError("expected (batch, N, d)")
    B, N, d = H_vision.shape
    if N % 2:
        raise ValueError(f"sequence length {N} is odd")
    return (H_vision[:, 0::2, :] + H_vision[:, 1::2, :]) / 2


def project_unshared(H_sub: Tensor, W_unshare: Tensor) -> Tensor:
    d = H_sub.shape[-1]
    if W_unshare.shape != (d, d):
        raise ValueError(f"projection must be {d}x{d}, got {tuple(W_unshare.shape)}")
    return H_sub @ W_unshare


@dataclass
class ConditioningEmbedding:
    """Row-stacked conditioning ``[shared; frame; cond; uncond]``."""

    rows: Tensor
    segments: dict[str, tuple[int, int]]

    @property
    def length(self) -> int:
        return self.rows.shape[-2]

    def segment(self, name: str) -> Tensor:
        a, b = self.segments[name]
        return self.rows[..., a:b, :]


def assemble(T_share: Tensor, Z_frame: Tensor, cond_text: Tensor, uncond_text: Tensor) -> ConditioningEmbedding:
    """Concatenate the four blocks along the sequence axis.

    Any block may have zero rows. Blocks may be 2-D ``(n, d)`` or batched
    ``(B, n, d)``; 2-D blocks are broadcast across the batch.
    """
    parts = [T_share, Z_frame, cond_text, uncond_text]
    d = {p.shape[-1] for p in parts}
    if len(d) != 1:
        raise ValueError(f"feature dimensions differ: {sorted(d)}")
    batch = {p.shape[0] for p in parts if p.ndim == 3}
    if len(batch) > 1:
        raise ValueError("batched blocks disagree on batch size")
    if batch:
        (B,) = batch
        parts = [p if p.ndim == 3 else p.unsqueeze(0).expand(B, -1, -1) for p in parts]
    segments = {}
    start = 0
    for name, p in zip(SEGMENTS, parts):
        segments[name] = (start, start + p.shape[-2])
        start += p.shape[-2]
    return ConditioningEmbedding(torch.cat(parts, dim=-2), segments)


@dataclass
class CrossAttentionParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor


def attention(Q: Tensor, K: Tensor, V: Tensor, return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes."""
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError("query and key dimensions differ")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError("keys and values disagree on length")
    logits = Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    attn = torch.softmax(logits, dim=-1)
    out = attn @ V
    return (out, attn) if return_weights else out


def cross_attention(X: Tensor, Z, p: CrossAttentionParams, return_weights: bool = False):
    """Attend from latent tokens ``X`` (``..., M, d``) to conditioning rows
    ``Z`` (``..., L, d``) with row-wise ``d x d`` projections."""
    if isinstance(Z, ConditioningEmbedding):
        Z = Z.rows
    d = X.shape[-1]
    if Z.shape[-1] != d:
        raise ValueError(f"conditioning dim {Z.shape[-1]} != latent dim {d}")
    for name in ("W_Q", "W_K", "W_V"):
        if getattr(p, name).shape != (d, d):
            raise ValueError(f"{name} must be {d}x{d}")
    return attention(X @ p.W_Q, Z @ p.W_K, Z @ p.W_V, return_weights=return_weights)


def guided_step(
    x_t: Tensor,
    X_tilde,
    alpha_t: float,
    denoiser,
    t: int,
    mode: str = "paper",
    schedule: Optional[NoiseSchedule] = None,
    t_prev: Optional[int] = None,
) -> Tensor:
    """Attention-guided update.

    ``paper`` mode is the simplified ``x_t - alpha_t * eps(x_t, X_tilde)``;
    ``standard`` mode feeds the same conditioned prediction into a DDIM step.
    """
    eps = denoiser(x_t, t, conditioning=X_tilde)
    if eps.shape != x_t.shape:
        raise ValueError("denoiser output shape mismatch")
    if mode == "paper":
        return x_t - alpha_t * eps
    if mode != "standard":
        raise ValueError(f"unknown guided mode {mode!r}")
    if schedule is None:
        raise ValueError("standard mode needs a schedule")
    return ddim_denoise_step(x_t, eps, t, schedule, t_prev=t_prev)


def gate_on(t: int, T_total: int, lo: float = 0.5) -> bool:
    if int(t) != t or not 0 <= t <= T_total:
        raise ValueError(f"timestep {t} outside [0, {T_total}]")
    return t >= lo * T_total


def piecewise_loss(eps: Tensor, eps_pred: Tensor, t: int, T_total: int, temporal_term, lam: float = 1.0):
    """Noise MSE, plus ``lam * temporal_term`` on the closed interval ``[T/2, T]``."""
    mse = diffusion_loss(eps, eps_pred)
    if gate_on(t, T_total):
        return mse + lam * temporal_term
    return mse


@dataclass
class TrainState:
    """Trainable set (adapter factors, unshared projection, shared tokens) plus
    optimizer bookkeeping. ``frozen`` entries are never touched."""

    params: dict[str, Tensor]
    frozen: dict[str, Tensor] = field(default_factory=dict)
    lr: float = 3e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    mode: str = "adamw"
    step: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        clash = set(self.params) & set(self.frozen)
        if clash:
            raise ValueError(f"parameters both trainable and frozen: {sorted(clash)}")


def sgd_update(state: TrainState, grads: Mapping[str, Tensor], lr: Optional[float] = None) -> TrainState:
    """Apply one update in place and return the state.

    ``sgd`` is ``theta - lr * grad``; ``adamw`` uses bias-corrected moments
    with decoupled weight decay.
    """
    frozen = set(grads) & set(state.frozen)
    if frozen:
        raise ValueError(f"gradients supplied for frozen parameters: {sorted(frozen)}")
    unknown = set(grads) - set(state.params)
    if unknown:
        raise KeyError(f"unknown parameters: {sorted(unknown)}")
    missing = set(state.params) - set(grads)
    if missing:
        raise KeyError(f"missing gradients: {sorted(missing)}")
    lr = state.lr if lr is None else lr
    state.step += 1
    with torch.no_grad():
        if state.mode == "sgd":
            for k, g in grads.items():
                state.params[k].sub_(lr * g)
            return state
        b1, b2 = state.betas
        bc1 = 1 - b1**state.step
        bc2 = 1 - b2**state.step
        for k, g in grads.items():
            p = state.params[k]
            m = state.exp_avg.setdefault(k, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(k, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if state.weight_decay:
                p.mul_(1 - lr * state.weight_decay)
            denom = (v.sqrt() / math.sqrt(bc2)).add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class PromptLearner(nn.Module):
    """Builds per-frame conditioning from shared tokens and pooled vision
    features.

    ``unshare_boost`` multiplies the frame rows; ``drop_shared`` /
    ``drop_unshared`` remove a block entirely (ablation modes).
    """

    def __init__(
        self,
        d: int = 768,
        n_share: int = 18,
        seed: int = 0,
        unshare_boost: float = 1.0,
        drop_shared: bool = False,
        drop_unshared: bool = False,
    ):
        super().__init__()
        self.d = d
        self.T_share = nn.Parameter(init_shared(n_share, d, seed))
        gen = torch.Generator().manual_seed(int(seed) + 1)
        bound = 1.0 / math.sqrt(d)
        # same distribution as nn.Linear(d, d).weight, stored as the right factor
        self.W_unshare = nn.Parameter(torch.empty(d, d).uniform_(-bound, bound, generator=gen))
        self.unshare_boost = unshare_boost
        self.drop_shared = drop_shared
        self.drop_unshared = drop_unshared

    @property
    def n_share(self) -> int:
        return self.T_share.shape[0]

    def forward(self, H_vision: Tensor, cond: Tensor, uncond: Tensor) -> ConditioningEmbedding:
        B = H_vision.shape[0]
        d = self.d
        shared = self.T_share.to(H_vision.dtype)
        if self.drop_shared:
            shared = shared[:0]
        if self.drop_unshared:
            frame = H_vision.new_zeros(B, 0, d)
        else:
            frame = project_unshared(pool_adjacent(H_vision), self.W_unshare.to(H_vision.dtype)) * self.unshare_boost
        return assemble(shared, frame, cond.to(H_vision.dtype), uncond.to(H_vision.dtype))


class ToyVisionEncoder(nn.Module):
    """Frozen patch embedder: one pooled token plus ``(crop/patch)^2`` patches.

    The default 28-pixel centre crop with 4-pixel patches gives 49 + 1 = 50
    tokens.
    """

    def __init__(self, d: int = 64, channels: int = 3, patch: int = 4, crop: int = 28, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.patch, self.crop = patch, crop
        n = (crop // patch) ** 2
        self.proj = nn.Parameter(torch.randn(channels * patch * patch, d, generator=gen) / math.sqrt(channels * patch * patch), requires_grad=False)
        self.pos = nn.Parameter(0.1 * torch.randn(n + 1, d, generator=gen), requires_grad=False)

    @property
    def n_tokens(self) -> int:
        return (self.crop // self.patch) ** 2 + 1

    def forward(self, frames: Tensor) -> Tensor:
        B, C, H, W = frames.shape
        top, left = (H - self.crop) // 2, (W - self.crop) // 2
        x = frames[:, :, top : top + self.crop, left : left + self.crop]
        p = self.patch
        x = x.unfold(2, p, p).unfold(3, p, p)  # B C h w p p
        x = x.permute(0, 2, 3, 1, 4, 5).reshape(B, -1, C * p * p)
        tokens = x @ self.proj.to(x.dtype)
        tokens = torch.cat([tokens.mean(dim=1, keepdim=True), tokens], dim=1)
        return tokens + self.pos.to(x.dtype)


class ToyTextEncoder(nn.Module):
    """Seeded embedding table over hashed words, padded to ``length`` rows.

    The empty prompt yields the unconditional embedding.
    """

    def __init__(self, d: int = 64, length: int = 8, vocab: int = 512, seed: int = 4321):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.length = length
        self.vocab = vocab
        self.table = nn.Parameter(torch.randn(vocab + 1, d, generator=gen) / math.sqrt(d), requires_grad=False)
        self.pos = nn.Parameter(0.1 * torch.randn(length, d, generator=gen), requires_grad=False)

    def token_ids(self, prompt: str) -> list[int]:
        words = re.findall(r"[a-z0-9]+", prompt.lower())[: self.length]
        ids = [1 + zlib.crc32(w.encode()) % self.vocab for w in words]
        return ids + [0] * (self.length - len(ids))

    def forward(self, prompt: str) -> Tensor:
        ids = torch.tensor(self.token_ids(prompt))
        return self.table[ids] + self.pos
