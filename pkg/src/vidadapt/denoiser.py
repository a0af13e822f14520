"""Small conditional UNet used as the trainable noise predictor.

One resolution level: the down path carries a cross-attention block whose
projections are the adapter sites, and the up-path block output is the
feature-capture site.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from vidadapt.adapter import FeatureCapture, LoRALinear, adapter_layers, set_adapters_active, wrap_linears
from vidadapt.tokens import ConditioningEmbedding, attention

Tensor = torch.Tensor

ADAPTER_SITES = ("to_q", "to_k", "to_v", "to_out")


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttnBlock(nn.Module):
    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(cond_dim, channels, bias=False)
        self.to_v = nn.Linear(cond_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, h: Tensor, cond: Tensor) -> Tensor:
        B, C, H, W = h.shape
        x = self.norm(h.flatten(2).transpose(1, 2))
        out = attention(self.to_q(x), self.to_k(cond), self.to_v(cond))
        out = self.to_out(out)
        return h + out.transpose(1, 2).reshape(B, C, H, W)


class ToyDenoiser(nn.Module):
    def __init__(
        self,
        latent_channels: int = 3,
        control_channels: int = 1,
        width: int = 32,
        cond_dim: int = 64,
        time_dim: int = 64,
        seed: int = 0,
        inject_features: bool = False,
        inject_scale: float = 0.1,
    ):
        super().__init__()
        self.latent_channels = latent_channels
        self.control_channels = control_channels
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.inject_features = inject_features
        self.inject_scale = inject_scale
        self.capture: Optional[FeatureCapture] = None
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            w, w2 = width, 2 * width
            self.conv_in = nn.Conv2d(latent_channels + control_channels, w, 3, padding=1)
            self.time_mlp = nn.Sequential(nn.Linear(time_dim, w2), nn.SiLU(), nn.Linear(w2, w2))
            self.res_in = ResBlock(w, w, w2)
            self.down = nn.Conv2d(w, w2, 3, stride=2, padding=1)
            self.res_down = ResBlock(w2, w2, w2)
            self.attn = CrossAttnBlock(w2, cond_dim)
            self.res_mid = ResBlock(w2, w2, w2)
            self.up = nn.Conv2d(w2, w, 3, padding=1)
            self.res_up = ResBlock(2 * w, w, w2)
            self.norm_out = nn.GroupNorm(8, w)
            self.conv_out = nn.Conv2d(w, latent_channels, 3, padding=1)

    def attach_adapters(self, rank: int = 4, seed: int = 0) -> list[LoRALinear]:
        gen = torch.Generator().manual_seed(seed)
        layers = wrap_linears(self.attn, ADAPTER_SITES, rank, generator=gen)
        return layers

    @property
    def adapters(self) -> list[LoRALinear]:
        return adapter_layers(self)

    def set_adapters_active(self, active: bool):
        set_adapters_active(self, active)

    def base_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters() if "lora_" not in k}

    def forward(
        self,
        x: Tensor,
        t,
        conditioning=None,
        control: Optional[Tensor] = None,
        return_features: bool = False,
    ):
        B, C, H, W = x.shape
        if C != self.latent_channels:
            raise ValueError(f"expected {self.latent_channels} latent channels, got {C}")
        if conditioning is None:
            raise ValueError("cross-attention needs conditioning")
        cond = conditioning.rows if isinstance(conditioning, ConditioningEmbedding) else conditioning
        if cond.ndim == 2:
            cond = cond.unsqueeze(0)
        cond = cond.to(x.dtype).expand(B, -1, -1)
        if control is None:
            control = x.new_zeros(B, self.control_channels, H, W)
        elif control.shape != (B, self.control_channels, H, W):
            raise ValueError(f"control shape {tuple(control.shape)} does not match latents")
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(B)
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))

        h0 = self.res_in(self.conv_in(torch.cat([x, control.to(x.dtype)], dim=1)), temb)
        h = self.res_down(self.down(h0), temb)
        h = self.attn(h, cond)
        h = self.res_mid(h, temb)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        feats = self.res_up(torch.cat([h, h0], dim=1), temb)
        if self.inject_features and B > 1:
            prev = torch.cat([feats[:1], feats[:-1]], dim=0)
            feats = feats + self.inject_scale * prev
        if self.capture is not None:
            self.capture.record(0, 0, feats)
        out = self.conv_out(F.silu(self.norm_out(feats)))
        return (out, feats) if return_features else out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
