"""Noise schedules, forward noising and deterministic DDIM steps.

Timesteps are 1-indexed: ``t`` runs over ``1..T_total`` and ``t = 0`` denotes
clean data (``alpha_bar(0) == 1``). Strided trajectories step from ``t`` to an
earlier ``t_prev``; the single-step coefficient is then
``alpha_bar(t) / alpha_bar(t_prev)``, which reduces to ``alphas[t-1]`` for
unit strides.

Two update forms are provided:

``"paper"``
    The reverse-mean step
    ``x_prev = (x_t - (1 - a) / sqrt(1 - abar_t) * eps) / sqrt(a) + sqrt(1 - a) * z``.
    With ``z = 0`` this contracts every trajectory toward the data mean, so it
    is not invertible over coarse grids.
``"ddim"``
    The eta-parameterised DDIM update. ``eta = 0`` is deterministic and is the
    form used for inversion and editing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np
import torch

Tensor = torch.Tensor
Timestep = int

FORMS = ("ddim", "paper")


class Denoiser(Protocol):
    """Anything that predicts the noise contained in ``x`` at timestep ``t``."""

    def __call__(
        self,
        x: Tensor,
        t: Timestep,
        conditioning: Optional[Tensor] = None,
        control: Optional[Tensor] = None,
    ) -> Tensor: ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients built from a beta sequence."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 2:
            raise ValueError("need at least two betas")
        if not np.all(np.isfinite(betas)) or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(betas) < 0):
            raise ValueError("betas must be non-decreasing")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @property
    def T_total(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def variance(self) -> np.ndarray:
        # fixed (non-learned) reverse variance: sigma_t^2 = beta_t
        return self.betas.copy()

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if int(t) != t or not lo <= t <= self.T_total:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T_total}]")
        return int(t)

    def alpha_bar(self, t: int) -> float:
        t = self.check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def timesteps(self, n_steps: int, t_end: Optional[int] = None) -> list[int]:
        """Uniform grid ``[0, ..., t_end]`` with ``n_steps`` intervals."""
        t_end = self.T_total if t_end is None else self.check_t(t_end)
        if n_steps < 1 or n_steps > t_end:
            raise ValueError(f"cannot split [0, {t_end}] into {n_steps} steps")
        grid = [int(round(t_end * i / n_steps)) for i in range(n_steps + 1)]
        assert all(b > a for a, b in zip(grid, grid[1:]))
        return grid


def build_schedule(T_total: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule."""
    if int(T_total) != T_total or T_total < 2:
        raise ValueError("T_total must be an integer >= 2")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    return NoiseSchedule(np.linspace(beta_min, beta_max, int(T_total), dtype=np.float64))


@dataclass(frozen=True)
class NoiseSpec:
    mu: float = 0.0
    sigma2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValueError("sigma2 must be non-negative")


def sample_noise(shape: Sequence[int], spec: NoiseSpec = NoiseSpec(), dtype=torch.float32) -> Tensor:
    """Seeded Gaussian draw; always generated in float64 then cast."""
    gen = torch.Generator().manual_seed(int(spec.seed))
    z = torch.randn(tuple(shape), generator=gen, dtype=torch.float64)
    return (spec.mu + math.sqrt(spec.sigma2) * z).to(dtype)


def _same_shape(*xs: Tensor):
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def noise_mix(x0: Tensor, eps: Tensor, alpha_bar: float) -> Tensor:
    _same_shape(x0, eps)
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * eps


def add_noise(x0: Tensor, t: int, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    return noise_mix(x0, eps, s.alpha_bar(s.check_t(t)))


def denoise_update(
    x_t: Tensor,
    eps_hat: Tensor,
    abar_t: float,
    abar_prev: float,
    z: Optional[Tensor] = None,
    form: str = "ddim",
    eta: float = 0.0,
) -> Tensor:
    """One reverse update from coefficients alone.

    ``z`` is ignored by the ``ddim`` form unless ``eta > 0``.
    """
    _same_shape(x_t, eps_hat)
    a = abar_t / abar_prev
    if form == "paper":
        if a <= 0:
            raise ValueError("alpha_t must be positive")
        out = (x_t - (1.0 - a) / math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(a)
        if z is not None:
            _same_shape(x_t, z)
            out = out + math.sqrt(max(1.0 - a, 0.0)) * z
        return out
    if form != "ddim":
        raise ValueError(f"unknown form {form!r}")
    x0_hat = (x_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
    sigma = 0.0
    if eta > 0 and z is not None:
        sigma = eta * math.sqrt((1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - a))
    out = math.sqrt(abar_prev) * x0_hat + math.sqrt(max(1.0 - abar_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0:
        _same_shape(x_t, z)
        out = out + sigma * z
    return out


def invert_update(x_prev: Tensor, eps_hat: Tensor, abar_t: float, abar_prev: float, form: str = "ddim") -> Tensor:
    """Exact algebraic inverse of the deterministic ``denoise_update``."""
    _same_shape(x_prev, eps_hat)
    a = abar_t / abar_prev
    if a <= 0:
        raise ValueError("alpha_t must be positive")
    if form == "paper":
        return math.sqrt(a) * x_prev + (1.0 - a) / math.sqrt(1.0 - abar_t) * eps_hat
    if form != "ddim":
        raise ValueError(f"unknown form {form!r}")
    x0_hat = (x_prev - math.sqrt(1.0 - abar_prev) * eps_hat) / math.sqrt(abar_prev)
    return math.sqrt(abar_t) * x0_hat + math.sqrt(1.0 - abar_t) * eps_hat


def _prev(t: int, t_prev: Optional[int], s: NoiseSchedule) -> int:
    t = s.check_t(t)
    t_prev = t - 1 if t_prev is None else s.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ValueError("t_prev must precede t")
    return t_prev


def ddim_denoise_step(
    x_t: Tensor,
    eps_hat: Tensor,
    t: int,
    s: NoiseSchedule,
    z: Optional[Tensor] = None,
    t_prev: Optional[int] = None,
    form: str = "ddim",
    eta: float = 0.0,
) -> Tensor:
    t_prev = _prev(t, t_prev, s)
    return denoise_update(x_t, eps_hat, s.alpha_bar(t), s.alpha_bar(t_prev), z=z, form=form, eta=eta)


def ddim_invert_step(
    x_prev: Tensor,
    eps_hat: Tensor,
    t: int,
    s: NoiseSchedule,
    t_prev: Optional[int] = None,
    form: str = "ddim",
) -> Tensor:
    t_prev = _prev(t, t_prev, s)
    return invert_update(x_prev, eps_hat, s.alpha_bar(t), s.alpha_bar(t_prev), form=form)


class AnalyticGaussianDenoiser:
    """Bayes-optimal noise predictor for data distributed as N(mean, var I).

    ``E[eps | x_t] = (x_t - sqrt(abar) mean) sqrt(1 - abar) / (abar var + 1 - abar)``.
    ``mean`` may be a scalar or a tensor broadcastable against the latents.
    """

    def __init__(self, mean: Union[float, Tensor], var: float, schedule: NoiseSchedule):
        if var < 0:
            raise ValueError("var must be non-negative")
        self.mean = mean
        self.var = float(var)
        self.schedule = schedule

    def __call__(self, x, t, conditioning=None, control=None):
        abar = self.schedule.alpha_bar(self.schedule.check_t(t))
        mean = self.mean
        if isinstance(mean, Tensor):
            mean = mean.to(dtype=x.dtype)
        return (x - math.sqrt(abar) * mean) * (math.sqrt(1.0 - abar) / (abar * self.var + 1.0 - abar))


def analytic_gaussian_denoiser(mean, var: float, schedule: NoiseSchedule) -> AnalyticGaussianDenoiser:
    return AnalyticGaussianDenoiser(mean, var, schedule)


StepHook = Callable[[int, int, Tensor], None]


def ddim_invert(
    x0: Tensor,
    denoiser: Denoiser,
    s: NoiseSchedule,
    n_steps: int,
    t_end: Optional[int] = None,
    fixed_point_iters: int = 0,
    conditioning=None,
    control=None,
) -> list[Tensor]:
    """Deterministic inversion ``x0 -> x_{t_end}``; returns every grid latent.

    The noise estimate for step ``t_prev -> t`` is first taken at ``x_{t_prev}``
    and then refined ``fixed_point_iters`` times at the current ``x_t`` guess.
    """
    grid = s.timesteps(n_steps, t_end)
    traj = [x0]
    x = x0
    for t_prev, t in zip(grid, grid[1:]):
        x = invert_fixed_point(x, denoiser, t, t_prev, s, fixed_point_iters, conditioning, control)
        traj.append(x)
    return traj


def invert_fixed_point(x_prev, denoiser, t, t_prev, s, iters=0, conditioning=None, control=None):
    eps = denoiser(x_prev, t, conditioning=conditioning, control=control)
    x_t = ddim_invert_step(x_prev, eps, t, s, t_prev=t_prev)
    for _ in range(iters):
        eps = denoiser(x_t, t, conditioning=conditioning, control=control)
        x_t = ddim_invert_step(x_prev, eps, t, s, t_prev=t_prev)
    return x_t


def ddim_sample(
    x_T: Tensor,
    denoiser: Denoiser,
    s: NoiseSchedule,
    n_steps: int,
    t_start: Optional[int] = None,
    form: str = "ddim",
    generator: Optional[torch.Generator] = None,
    conditioning=None,
    control=None,
) -> Tensor:
    """Run the reverse loop from ``t_start`` down to 0.

    Passing a generator makes the ``paper`` form stochastic (fresh ``z`` for
    every step except the last one).
    """
    grid = s.timesteps(n_steps, t_start)
    x = x_T
    for t_prev, t in reversed(list(zip(grid, grid[1:]))):
        eps = denoiser(x, t, conditioning=conditioning, control=control)
        z = None
        if generator is not None and t_prev > 0:
            z = torch.randn(x.shape, generator=generator, dtype=torch.float64).to(x.dtype)
        x = ddim_denoise_step(x, eps, t, s, z=z, t_prev=t_prev, form=form, eta=1.0 if z is not None else 0.0)
    return x
