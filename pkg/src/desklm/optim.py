"""AdamW, the warmup/decay LR schedule with mid-flight overrides, gradient
clipping, and the two-stage gradient predivide reduction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

Grads = dict[str, np.ndarray]


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass(frozen=True)
class ClipConfig:
    max_norm: float = 1.0  # mid-flight alternative: 0.3

    def __post_init__(self):
        if self.max_norm <= 0.0:
            raise ConfigError("max_norm must be > 0")


@dataclass(frozen=True)
class PredivideConfig:
    world_size: int = 1

    def __post_init__(self):
        if self.world_size < 1:
            raise ConfigError("world_size must be >= 1")


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear warmup to ``max_lr``, then linear decay to ``end_factor * max_lr``
    at ``decay_horizon_tokens``, constant afterwards.

    Warmup is denominated in steps or in tokens (exactly one). Step-denominated
    warmup needs ``tokens_per_step`` to locate where the token-denominated decay
    segment starts. ``overrides`` are (step, factor) pairs; each multiplies the
    remaining schedule from its step onward and they compound.
    """

    max_lr: float
    decay_horizon_tokens: int
    warmup_steps: int | None = None
    warmup_tokens: int | None = None
    tokens_per_step: int | None = None
    end_factor: float = 0.1
    overrides: tuple[tuple[int, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if (self.warmup_steps is None) == (self.warmup_tokens is None):
            raise ConfigError("exactly one of warmup_steps / warmup_tokens must be set")
        if self.warmup_steps is not None and self.tokens_per_step is None:
            raise ConfigError("step-denominated warmup requires tokens_per_step")
        if not 0.0 < self.end_factor <= 1.0:
            raise ConfigError("end_factor must be in (0, 1]")
        if self.max_lr < 0.0:
            raise ConfigError("max_lr must be >= 0")
        if self._warmup_end_tokens() >= self.decay_horizon_tokens:
            raise ConfigError("warmup must end before the decay horizon")
        steps = [s for s, _ in self.overrides]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("override steps must be strictly increasing")
        if any(f <= 0.0 for _, f in self.overrides):
            raise ConfigError("override factors must be positive")

    def _warmup_end_tokens(self) -> float:
        if self.warmup_tokens is not None:
            return float(self.warmup_tokens)
        return float(self.warmup_steps * self.tokens_per_step)

    def with_override(self, step: int, factor: float) -> "ScheduleConfig":
        from dataclasses import replace

        return replace(self, overrides=(*self.overrides, (step, factor)))


def lr_at(schedule: ScheduleConfig, step: int, tokens_seen: int) -> float:
    """Learning rate for ``step`` given ``tokens_seen`` so far.

    Piecewise linear and continuous at the warmup/decay joint; never negative;
    lr_at(0) = 0 under step warmup and token warmup alike.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.warmup_steps is not None:
        in_warmup = step < schedule.warmup_steps
        progress = step / schedule.warmup_steps
    else:
        in_warmup = tokens_seen < schedule.warmup_tokens
        progress = tokens_seen / schedule.warmup_tokens
    if in_warmup:
        base = schedule.max_lr * progress
    else:
        start = schedule._warmup_end_tokens()
        horizon = float(schedule.decay_horizon_tokens)
        frac = (min(float(tokens_seen), horizon) - start) / (horizon - start)
        base = schedule.max_lr * (1.0 - (1.0 - schedule.end_factor) * frac)
    factor = 1.0
    for s, f in schedule.overrides:
        if step >= s:
            factor *= f
    return base * factor


@dataclass
class OptimizerState:
    """Per-parameter Adam moments, kept at full (64-bit) precision."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
            t=0,
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: Grads,
    state: OptimizerState,
    lr: float,
    cfg: AdamWConfig,
) -> None:
    """One bias-corrected AdamW update, in place.

    Decoupled weight decay: param <- param - lr * wd * param, applied after the
    Adam step. Callers must have filtered overflow steps already; a non-finite
    gradient here is a contract violation.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ValueError(f"adamw_step: non-finite gradient for {name!r}; "
                             "overflow steps must be skipped by the caller")
        if g.shape != params[name].shape:
            raise ValueError(f"adamw_step: shape mismatch for {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    for name, g in grads.items():
        g64 = g.astype(np.float64, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g64
        v *= b2
        v += (1 - b2) * g64 * g64
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = params[name]
        update = (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype, copy=False)
        p -= update
        if cfg.weight_decay:
            p -= (lr * cfg.weight_decay) * p


def sgd_step(params: dict[str, np.ndarray], grads: Grads, lr: float) -> None:
    """Plain SGD, exposed for the mid-flight optimizer-switch experiment."""
    for name, g in grads.items():
        params[name] -= (lr * g).astype(params[name].dtype, copy=False)


def global_grad_norm(grads: Grads) -> float:
    # fixed (sorted-name) reduction order: the result must not depend on dict
    # insertion order, or a resumed run clips by a last-ulp-different factor
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(grads[name].astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(grads: Grads, cfg: ClipConfig) -> tuple[Grads, float]:
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Returns the clipped gradients and the pre-clip norm (for telemetry).
    """
    norm = global_grad_norm(grads)
    if norm <= cfg.max_norm or norm == 0.0:
        return grads, norm
    scale = cfg.max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def predivide_reduce(per_worker_grads: list[Grads], cfg: PredivideConfig) -> Grads:
    """Average worker gradients as (sum of g_i / sqrt(N)) / sqrt(N).

    Splitting the division keeps intermediate magnitudes bounded by
    max|g| * sqrt(N) while the result equals the plain mean.
    """
    n = cfg.world_size
    if len(per_worker_grads) != n:
        raise ValueError(
            f"predivide_reduce: expected {n} worker grad sets, got {len(per_worker_grads)}"
        )
    root = np.sqrt(n)
    keys = per_worker_grads[0].keys()
    out: Grads = {}
    for k in keys:
        acc = per_worker_grads[0][k] / root
        for w in per_worker_grads[1:]:
            acc = acc + w[k] / root
        out[k] = acc / root
    return out
