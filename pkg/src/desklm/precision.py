"""Mixed-precision contract and dynamic loss scaling.

Model weights may run at reduced precision (emulated binary16 so the same code
path works on any hardware) while optimizer state stays at full precision.
The loss scaler multiplies the loss before backward to keep small gradients
above underflow, backs off on overflow, and grows again after a stable
stretch. Scales are powers of two, so scaling/unscaling is exact in binary
floating point.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

FLOAT16_MAX = 65504.0


@dataclass(frozen=True)
class PrecisionConfig:
    weight_mode: str = "full"  # "full" | "emulated-half"
    overflow_threshold: float = FLOAT16_MAX

    def __post_init__(self):
        if self.weight_mode not in ("full", "emulated-half"):
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}")
        if self.overflow_threshold <= 0:
            raise ConfigError("overflow_threshold must be > 0")


@dataclass(frozen=True)
class LossScaler:
    scale: float = 2.0**16
    growth_interval: int = 2000
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    consecutive_good: int = 0
    min_scale: float = 2.0**-5
    healthy_threshold: float = 1.0

    def __post_init__(self):
        if not self.scale >= self.min_scale > 0:
            raise ConfigError("scale must satisfy scale >= min_scale > 0")
        if not 0 <= self.consecutive_good < self.growth_interval:
            raise ConfigError("consecutive_good must be < growth_interval")


def scale_loss(loss: Tensor, scaler: LossScaler) -> Tensor:
    """Multiply the loss by the current scale (recorded, so backward scales too)."""
    return T.mul(loss, scaler.scale)


def unscale_grads(
    grads: dict[str, np.ndarray], scaler: LossScaler
) -> tuple[dict[str, np.ndarray] | None, bool]:
    """Divide gradients by the scale; flag overflow if anything is non-finite.

    On overflow the gradients are discarded (None) — the step must be skipped.
    """
    out: dict[str, np.ndarray] = {}
    overflow = False
    for name, g in grads.items():
        if not np.isfinite(g).all():
            overflow = True
            break
        out[name] = g / scaler.scale
    if overflow:
        return None, True
    return out, False


def scaler_update(scaler: LossScaler, overflow_found: bool) -> LossScaler:
    """State transition after one step: back off on overflow, grow when due."""
    if overflow_found:
        return replace(
            scaler,
            scale=max(scaler.scale * scaler.backoff_factor, scaler.min_scale),
            consecutive_good=0,
        )
    good = scaler.consecutive_good + 1
    if good >= scaler.growth_interval:
        return replace(scaler, scale=scaler.scale * scaler.growth_factor, consecutive_good=0)
    return replace(scaler, consecutive_good=good)


def is_healthy(scaler: LossScaler) -> bool:
    return scaler.scale >= scaler.healthy_threshold


def reset_scale(scaler: LossScaler, initial_scale: float = 2.0**16) -> LossScaler:
    """Mid-flight scaler reset: back to the initial scale, counter cleared."""
    return replace(scaler, scale=initial_scale, consecutive_good=0)


def emulate_half(x, cfg: PrecisionConfig):
    """Round to nearest-even binary16 values; |x| > threshold becomes infinity.

    Accepts a Tensor or a raw array and returns the same kind. The threshold
    check runs first, so a custom threshold can flag values IEEE would still
    round into range.
    """
    if cfg.weight_mode != "emulated-half":
        raise ValueError("emulate_half requires weight_mode='emulated-half'")
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    dtype = arr.dtype
    with np.errstate(over="ignore"):
        out = arr.astype(np.float16).astype(dtype)
    over = np.abs(arr) > cfg.overflow_threshold
    if over.any():
        out = np.where(over, np.sign(arr) * np.inf, out).astype(dtype)
    if isinstance(x, Tensor):
        return Tensor(out, requires_grad=x.requires_grad)
    return out
