"""Low-rank adapters, feature capture and the frame-similarity temporal loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor


@dataclass
class AdapterParams:
    """Frozen base weight ``W0`` (d_out x d_in) plus factors ``B @ A``."""

    W0: Tensor
    A: Tensor
    B: Tensor
    scale: float = 1.0

    def __post_init__(self):
        d_out, d_in = self.W0.shape
        r = self.A.shape[0]
        if self.A.shape != (r, d_in) or self.B.shape != (d_out, r):
            raise ValueError(
                f"factor shapes {tuple(self.A.shape)}, {tuple(self.B.shape)} do not fit W0 {tuple(self.W0.shape)}"
            )
        if r > min(d_in, d_out):
            raise ValueError(f"rank {r} exceeds min(d_in, d_out)")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @classmethod
    def init(cls, W0: Tensor, rank: int = 4, generator: Optional[torch.Generator] = None, std: float = 0.02):
        d_out, d_in = W0.shape
        A = torch.randn(rank, d_in, generator=generator, dtype=torch.float64).to(W0.dtype) * std
        B = torch.zeros(d_out, rank, dtype=W0.dtype)
        return cls(W0, A, B)


def lora_forward(x: Tensor, p: AdapterParams) -> Tensor:
    """``W0 x + scale * B (A x)`` applied along the last axis of ``x``."""
    d_in = p.W0.shape[1]
    if x.shape[-1] != d_in:
        raise ValueError(f"input dim {x.shape[-1]} != {d_in}")
    out = x @ p.W0.T
    return out if p.scale == 0 else out + p.scale * ((x @ p.A.T) @ p.B.T)


def merge_adapter(p: AdapterParams, ratio: float) -> Tensor:
    if not 0 <= ratio <= 1:
        raise ValueError("merge ratio must lie in [0, 1]")
    return p.W0 + ratio * (p.B @ p.A)


class LoRALinear(nn.Module):
    """Linear layer with a frozen base and a gateable low-rank delta.

    When the adapter is inactive the layer computes exactly ``F.linear`` with
    the base weight, so gated-off steps match an adapter-free model bit for bit.
    """

    def __init__(self, base: nn.Linear, rank: int = 4, scale: float = 1.0, generator: Optional[torch.Generator] = None):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} exceeds min({d_in}, {d_out})")
        self.weight = nn.Parameter(base.weight.detach().clone(), requires_grad=False)
        self.bias = None if base.bias is None else nn.Parameter(base.bias.detach().clone(), requires_grad=False)
        init = AdapterParams.init(self.weight.data, rank, generator)
        self.lora_A = nn.Parameter(init.A)
        self.lora_B = nn.Parameter(init.B)
        self.scale = scale
        self.active = True
        self.merged: Optional[Tensor] = None

    @property
    def params(self) -> AdapterParams:
        return AdapterParams(self.weight, self.lora_A, self.lora_B, self.scale)

    def merge(self, ratio: float):
        """Bake ``ratio * B A`` into a merged weight used whenever active."""
        with torch.no_grad():
            self.merged = merge_adapter(self.params, ratio).detach().clone()

    def unmerge(self):
        self.merged = None

    def forward(self, x: Tensor) -> Tensor:
        if not self.active:
            return F.linear(x, self.weight, self.bias)
        if self.merged is not None:
            return F.linear(x, self.merged, self.bias)
        out = F.linear(x, self.weight, self.bias)
        if self.scale == 0:
            return out
        return out + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)


def adapter_layers(module: nn.Module) -> list[LoRALinear]:
    return [m for m in module.modules() if isinstance(m, LoRALinear)]


def set_adapters_active(module: nn.Module, active: bool):
    for m in adapter_layers(module):
        m.active = active


class FeatureCapture:
    """Detached copies of block outputs keyed by ``(layer, block, frame)``."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.features: dict[tuple, Tensor] = {}

    def record(self, layer: int, block: int, feats: Tensor, frame_offset: int = 0):
        if not self.enabled:
            return
        for i, f in enumerate(feats):
            self.features[(layer, block, frame_offset + i)] = f.detach().clone()

    def frames(self, layer: int, block: int) -> list[Tensor]:
        keys = sorted(k for k in self.features if k[:2] == (layer, block))
        return [self.features[k] for k in keys]

    def clear(self):
        self.features.clear()


def frame_similarity(F_a: Tensor, F_b: Tensor) -> Tensor:
    """Cosine similarity of two feature maps flattened to vectors."""
    if F_a.shape != F_b.shape:
        raise ValueError("feature shapes differ")
    a = F_a.reshape(-1)
    b = F_b.reshape(-1)
    na = a.norm()
    nb = b.norm()
    if na == 0 or nb == 0:
        raise ValueError("zero-norm feature map")
    return (a @ b) / (na * nb)


def consecutive_similarities(features: Sequence[Tensor] | Tensor) -> Tensor:
    """``s_k = Sim(F_k, F_{k+1})`` for a frame-ordered stack."""
    if isinstance(features, Tensor):
        flat = features.reshape(features.shape[0], -1)
    else:
        flat = torch.stack([f.reshape(-1) for f in features])
    norms = flat.norm(dim=1)
    if (norms == 0).any():
        raise ValueError("zero-norm feature map")
    unit = flat / norms[:, None]
    return (unit[:-1] * unit[1:]).sum(dim=1)


def temporal_loss(features: Sequence[Tensor] | Tensor) -> Tensor:
    """Mean squared change between consecutive frame similarities.

    With frames ``0..n-1`` and ``s_k = Sim(F_k, F_{k+1})`` the loss is
    ``mean_{k=1..n-2} (s_k - s_{k-1})^2``.
    """
    if len(features) < 3:
        raise ValueError("temporal loss needs at least 3 frames")
    s = consecutive_similarities(features)
    return (s[1:] - s[:-1]).pow(2).mean()


def diffusion_loss(eps_true: Tensor, eps_pred: Tensor) -> Tensor:
    if eps_true.shape != eps_pred.shape:
        raise ValueError("shape mismatch")
    return (eps_true - eps_pred).pow(2).mean()


@dataclass(frozen=True)
class LossWeights:
    lambda_temporal: float = 1.0
    lambda_diffusion: float = 0.01

    def __post_init__(self):
        if self.lambda_temporal < 0 or self.lambda_diffusion < 0:
            raise ValueError("loss weights must be non-negative")


def total_loss(lt, ld, w: LossWeights = LossWeights()):
    return w.lambda_temporal * lt + w.lambda_diffusion * ld


@dataclass(frozen=True)
class ActivationWindow:
    """Closed interval ``[lo, hi]`` of ``t / T_total``."""

    lo: float
    hi: float = 1.0

    def __post_init__(self):
        if not 0 <= self.lo < self.hi <= 1:
            raise ValueError(f"need 0 <= lo < hi <= 1, got [{self.lo}, {self.hi}]")

    @classmethod
    def parse(cls, text: str) -> "ActivationWindow":
        parts = [float(v) for v in str(text).replace(":", ",").split(",")]
        if len(parts) == 1:
            parts.append(1.0)
        if len(parts) != 2:
            raise ValueError(f"bad window {text!r}")
        return cls(*parts)

    def __str__(self):
        return f"{self.lo:g},{self.hi:g}"


TRAIN_WINDOW = ActivationWindow(0.5, 1.0)
INFER_WINDOW = ActivationWindow(0.9, 1.0)


def is_active(t: int, T_total: int, w: ActivationWindow) -> bool:
    if int(t) != t or not 1 <= t <= T_total:
        raise ValueError(f"timestep {t} outside [1, {T_total}]")
    frac = t / T_total
    return w.lo <= frac <= w.hi


def wrap_linears(module: nn.Module, names: Iterable[str], rank: int, generator: Optional[torch.Generator] = None) -> list[LoRALinear]:
    """Replace the named ``nn.Linear`` children of ``module`` with adapters."""
    out = []
    for name in names:
        base = getattr(module, name)
        if isinstance(base, LoRALinear):
            out.append(base)
            continue
        if not isinstance(base, nn.Linear):
            raise TypeError(f"{name} is not a Linear layer")
        lora = LoRALinear(base, rank=rank, generator=generator)
        setattr(module, name, lora)
        out.append(lora)
    return out
