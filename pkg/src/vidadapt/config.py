"""Flat ``key = value`` run configuration.

Every field doubles as a CLI flag (``lora_rank`` <-> ``--lora-rank``). Sweep
files use the same syntax; a comma-separated value on a scalar key declares a
grid axis.
"""

from __future__ import annotations

import dataclasses
import itertools
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from vidadapt.adapter import ActivationWindow, LossWeights
from vidadapt.bilateral import BOUNDARIES, DIRECTIONS, BilateralConfig

MODES = ("train-adapter", "invert", "sample", "edit", "metrics", "ablate")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "edit"
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = ""
    jobs: int = 1
    dtype: str = "float32"

    # schedule
    t_total: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    # bilateral inversion
    kernel_size: int = 3
    sigma_spatial: float = 1.0
    sigma_intensity: float = 0.1
    boundary: str = "reflect"
    invert_steps: int = 5
    filter_direction: str = "paper"
    filter_max_t: float = 1.0
    fixed_point_iters: int = 5
    strength: float = 1.0

    # temporal adapter
    use_adapter: bool = True
    lora_rank: int = 4
    lambda_temporal: float = 1.0
    lambda_diffusion: float = 0.01
    train_window: str = "0.5,1.0"
    infer_window: str = "0.9,1.0"
    merge_ratio: Optional[float] = None
    adapter_scale: float = 1.0

    # prompt tokens
    n_share: int = 18
    toy_text_len: int = 8
    guided_mode: str = "standard"
    unshare_boost: float = 1.0
    drop_shared: bool = False
    drop_unshared: bool = False

    # toy model
    width: int = 32
    d_model: int = 64
    use_controls: bool = True
    inject_features: bool = False

    # training
    steps: int = 2000
    base_steps: int = 1500
    lr: float = 3e-5
    base_lr: float = 2e-3
    warmup_steps: int = 500
    grad_accum: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    train_clips: int = 64
    base_batch_pairs: int = 4

    # data
    frames: int = 8
    size: int = 32
    texture_noise: float = 0.1
    eval_clips: int = 10
    codec: str = "avgpool"

    # io
    checkpoint: str = ""
    input: str = ""
    reference: str = ""
    prompt: str = ""
    denoiser: str = "trained"
    oracle_var: float = 0.05
    metric_hook: str = ""
    hook_timeout: float = 60.0
    sweep: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.filter_direction not in DIRECTIONS:
            raise ConfigError(f"filter_direction must be one of {DIRECTIONS}")
        if self.boundary not in BOUNDARIES:
            raise ConfigError(f"boundary must be one of {BOUNDARIES}")
        if self.guided_mode not in ("paper", "standard"):
            raise ConfigError("guided_mode must be paper or standard")
        if self.denoiser not in ("trained", "oracle"):
            raise ConfigError("denoiser must be trained or oracle")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError("optimizer must be adamw or sgd")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.codec not in ("avgpool", "identity"):
            raise ConfigError("codec must be avgpool or identity")
        if self.merge_ratio is not None and not 0 <= self.merge_ratio <= 1:
            raise ConfigError("merge_ratio must lie in [0, 1]")
        if not 0 < self.strength <= 1:
            raise ConfigError("strength must lie in (0, 1]")
        if self.grad_accum < 1 or self.steps < 0 or self.base_steps < 0:
            raise ConfigError("step counts must be non-negative, grad_accum >= 1")
        try:
            self.windows()
            self.bilateral()
            self.loss_weights()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def windows(self) -> tuple[ActivationWindow, ActivationWindow]:
        return ActivationWindow.parse(self.train_window), ActivationWindow.parse(self.infer_window)

    def bilateral(self) -> BilateralConfig:
        return BilateralConfig(
            kernel_size=self.kernel_size,
            sigma_spatial=self.sigma_spatial,
            sigma_intensity=self.sigma_intensity,
            boundary=self.boundary,
            max_t_fraction=self.filter_max_t,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_temporal, self.lambda_diffusion)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def training_key(self) -> tuple:
        """Fields that change the trained weights."""
        names = (
            "seed", "t_total", "beta_min", "beta_max", "lora_rank", "lambda_temporal", "lambda_diffusion",
            "train_window", "n_share", "toy_text_len", "unshare_boost", "drop_shared", "drop_unshared",
            "width", "d_model", "use_controls", "inject_features", "steps", "base_steps", "lr", "base_lr",
            "warmup_steps", "grad_accum", "adam_beta1", "adam_beta2", "weight_decay", "optimizer",
            "train_clips", "base_batch_pairs", "frames", "size", "texture_noise", "codec",
        )
        return tuple((n, getattr(self, n)) for n in names)


_HINTS = None


def field_types() -> dict[str, Any]:
    global _HINTS
    if _HINTS is None:
        _HINTS = typing.get_type_hints(RunConfig)
    return _HINTS


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(format_value(x) for x in v)
    return str(v)


def parse_value(name: str, text: str):
    types = field_types()
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    tp = types[name]
    text = str(text).strip()
    origin = typing.get_origin(tp)
    try:
        if origin is typing.Union:  # Optional[float]
            if text.lower() in ("none", ""):
                return None
            (inner,) = [a for a in typing.get_args(tp) if a is not type(None)]
            return inner(text)
        if origin is list:
            (inner,) = typing.get_args(tp)
            return [inner(x) for x in text.split(",") if x.strip()]
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {text!r}") from e


def read_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k.strip().replace("-", "_"), v.strip()))
    return pairs


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    values = {}
    for k, v in read_pairs(text):
        values[k] = parse_value(k, v)
    base = base or RunConfig()
    try:
        return base.replace(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    return parse_config(Path(path).read_text(), base)


def parse_sweep(text: str) -> dict[str, list]:
    """``axis = v1,v2,v3`` lines -> ordered axis map. Windows use ``;`` between
    values (``train_window = 0.5,1;0.8,1``)."""
    axes = {}
    for k, v in read_pairs(text):
        if k in ("train_window", "infer_window", "prompt"):
            raw = [x.strip() for x in v.split(";") if x.strip()]
        else:
            raw = [x.strip() for x in v.split(",") if x.strip()]
        if not raw:
            raise ConfigError(f"empty axis {k!r}")
        axes[k] = [parse_value(k, x) for x in raw]
    return axes


def expand_grid(axes: dict[str, list]) -> list[dict[str, Any]]:
    if not axes:
        raise ConfigError("empty sweep grid")
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]
