"""Divergence detection and restart-point selection rules.

A run is diverged when the loss goes non-finite, the loss scaler has crashed
below its healthy floor, or the loss has exceeded the best seen so far by a
margin for several consecutive records. A checkpoint qualifies as a restart
point when its snapshot still had a healthy scale AND the activation norms
recorded after it trend downward (non-positive least-squares slope).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import HealthRecord
from .errors import ConfigError, UnrecoverableDivergence


@dataclass(frozen=True)
class HealthPolicy:
    scalar_floor: float = 1.0
    trend_window: int = 20
    trend_slope_max: float = 0.0
    loss_margin: float = 0.5
    loss_patience: int = 5

    def __post_init__(self):
        if self.trend_window < 2:
            raise ConfigError("trend_window must be >= 2")
        if self.loss_margin <= 0:
            raise ConfigError("loss_margin must be > 0")
        if self.loss_patience < 1:
            raise ConfigError("loss_patience must be >= 1")


@dataclass(frozen=True)
class RecoveryConfig:
    lr_factor: float = 2.0 / 3.0  # compounds per restart event
    tighten_clip: bool = False
    tightened_max_norm: float = 0.3


@dataclass(frozen=True)
class Verdict:
    diverged: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.diverged


@dataclass(frozen=True)
class CheckpointMeta:
    step: int
    path: Path
    scale: float


def detect_divergence(history: Sequence[HealthRecord], policy: HealthPolicy) -> Verdict:
    """Classify the run's current health from its record history."""
    if not history:
        raise ValueError("detect_divergence: history must be nonempty")
    latest = history[-1]
    if latest.scale < policy.scalar_floor:
        return Verdict(True, "scaler-crash")
    if not math.isfinite(latest.loss):
        return Verdict(True, "loss-nonfinite")
    if len(history) > policy.loss_patience:
        window = history[-policy.loss_patience :]
        best = min(r.loss for r in history[: -policy.loss_patience])
        if all(r.loss > best + policy.loss_margin for r in window):
            return Verdict(True, "loss-margin")
    return Verdict(False)


def activation_slope(records: Sequence[HealthRecord]) -> float:
    """Least-squares slope of activation norm against step.

    Computed from centered covariances so exactly-flat data yields exactly 0
    (polyfit's SVD path returns ~1e-16 noise there, which would spuriously
    fail a non-positive-slope gate).
    """
    if len(records) < 2:
        raise ValueError("activation_slope needs at least 2 records")
    x = np.array([r.step for r in records], dtype=np.float64)
    y = np.array([r.act_norm for r in records], dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc * yc).sum() / (xc * xc).sum())


def select_restart_checkpoint(
    checkpoints: Sequence[CheckpointMeta],
    following: Mapping[int, Sequence[HealthRecord]],
    policy: HealthPolicy,
) -> CheckpointMeta:
    """Latest checkpoint with a healthy snapshot scale and downward-trending
    activation norms in the (up to) window-W records after it.

    ``following`` maps checkpoint step -> the health records observed after
    that checkpoint was written. Fewer than 2 following records means the
    trend is not assessable and the checkpoint does not qualify.
    """
    if not checkpoints:
        raise UnrecoverableDivergence("no checkpoints available to restart from")
    for meta in sorted(checkpoints, key=lambda c: c.step, reverse=True):
        if meta.scale < policy.scalar_floor:
            continue
        records = list(following.get(meta.step, ()))[: policy.trend_window]
        if len(records) < 2:
            continue
        if activation_slope(records) <= policy.trend_slope_max:
            return meta
    raise UnrecoverableDivergence(
        "no checkpoint satisfies the restart health rule "
        f"(scale >= {policy.scalar_floor} and non-positive activation trend)"
    )
