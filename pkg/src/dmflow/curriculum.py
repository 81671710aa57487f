"""Staged construction of the regression target for average-velocity training.

The training budget is split into equal stages.  Stage 0 regresses the
plain velocity target.  Intermediate stages use the discrete bootstrap
target

    u_target = (v * delta + u_net(z_t - v*delta, r, t - delta) * (t-r))
               / (delta + t - r)

with a per-stage step size ``delta`` that shrinks geometrically, either
directly in t ("plain": ``(t-r)/q^i``) or through the variance-exploding
time warp ``phi(t) = t / (1-t)`` ("ve"), which shrinks steps much faster
at mid-range times.  The final stage switches to the continuous objective,
``v - (t-r) * dudt`` with ``dudt`` from a forward-mode JVP.

All targets are evaluated on a detached parameter snapshot: they are plain
value arrays and the optimiser never differentiates through them.  Rows
whose time gap is below ``eps_t`` fall back to the velocity target at
every stage, for numerical stability.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .paths import T_MIN, PathSample
from .tensor import NonFiniteError

SCHEDULE_KINDS = ("plain", "ve")


class ObjectiveKind(IntEnum):
    FM = 0   # plain velocity regression
    DMF = 1  # discrete bootstrap target
    MF = 2   # continuous target via JVP


@dataclass
class CurriculumSchedule:
    """Stage bookkeeping: ``stages`` equal budget slices with decay ``decay``."""

    stages: int
    decay: float
    kind: str
    eps_t: float
    epochs_per_stage: int

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.decay <= 1.0:
            raise ValueError("decay factor must be > 1")
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.eps_t <= 0.0:
            raise ValueError("eps_t must be positive")
        if self.epochs_per_stage < 1:
            raise ValueError("epochs_per_stage must be >= 1")


@dataclass
class TrainTarget:
    """Stop-gradient regression target plus per-row bookkeeping."""

    u_target: np.ndarray
    stage: int
    delta_used: np.ndarray
    kind: np.ndarray  # ObjectiveKind codes, one per row


def stage_of(epoch: int, schedule: CurriculumSchedule) -> int:
    """Stage index for an epoch; epochs beyond the budget clamp to the last."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(epoch // schedule.epochs_per_stage, schedule.stages - 1)


def delta_plain(t, r, i: int, q: float):
    """Step size ``(t - r) / q^i``."""
    t, r = np.asarray(t, float), np.asarray(r, float)
    return (t - r) / q**i


def time_warp(t):
    """``phi(t) = t / (1 - t)``, mapping [0, 1) onto [0, inf)."""
    t = np.asarray(t, float)
    return t / (1.0 - t)


def time_warp_inv(y):
    """Inverse warp ``y / (1 + y)``."""
    y = np.asarray(y, float)
    return y / (1.0 + y)


def delta_ve(t, r, i: int, q: float):
    """Step size shrunk geometrically in warped time.

    ``delta = t - phi_inv(phi(t) - (phi(t) - phi(r)) / q^i)``; equals
    ``t - r`` at stage 0 and decreases strictly with the stage.
    """
    t, r = np.asarray(t, float), np.asarray(r, float)
    if np.any(t > 1.0 - T_MIN + 1e-15):
        raise ValueError("time warp undefined near t = 1; clamp t below 1 - T_MIN")
    if np.any(r > t):
        raise ValueError("requires r <= t elementwise")
    pt, pr = time_warp(t), time_warp(r)
    return t - time_warp_inv(pt - (pt - pr) / q**i)


def stage_delta(t, r, stage: int, schedule: CurriculumSchedule):
    if schedule.kind == "ve":
        return delta_ve(t, r, stage, schedule.decay)
    return delta_plain(t, r, stage, schedule.decay)


def build_target(net, sample: PathSample, vt, stage: int, schedule: CurriculumSchedule) -> TrainTarget:
    """Construct the stage target for one batch.

    ``net`` is any object exposing ``forward(z, r, t)`` and
    ``forward_jvp(z, r, t, v)`` — a detached parameter snapshot during
    training, or the analytic oracle in verification.  ``vt`` is passed
    separately because the trainer may substitute the stable-target
    velocity for the conditional one.
    """
    if not 0 <= stage < schedule.stages:
        raise ValueError(f"stage {stage} outside [0, {schedule.stages})")
    vt = np.asarray(vt, float)
    t, r, zt = sample.t, sample.r, sample.zt
    dt = t - r
    fm_rows = dt < schedule.eps_t
    B = t.shape[0]
    delta_used = np.zeros(B)
    kind = np.full(B, ObjectiveKind.FM, dtype=np.int8)

    if stage == 0:
        u_target = vt.copy()
    elif stage == schedule.stages - 1:
        _, dudt = net.forward_jvp(zt, r, t, vt)
        u_target = vt - dt[:, None] * dudt
        kind[~fm_rows] = ObjectiveKind.MF
    else:
        delta = stage_delta(t, r, stage, schedule)
        z_eval = zt - vt * delta[:, None]
        t_eval = np.maximum(t - delta, r)  # guard rounding at the full-span stage
        u_net = net.forward(z_eval, r, t_eval)
        alpha = (delta / (delta + dt))[:, None]
        u_target = alpha * vt + (1.0 - alpha) * u_net
        kind[~fm_rows] = ObjectiveKind.DMF
        delta_used = np.where(fm_rows, 0.0, delta)

    if stage != 0:
        u_target = np.where(fm_rows[:, None], vt, u_target)
    if not np.all(np.isfinite(u_target)):
        bad = np.where(~np.all(np.isfinite(u_target), axis=1))[0]
        raise NonFiniteError(
            f"non-finite target at stage {stage} "
            f"(kind {ObjectiveKind(int(kind[bad[0]])).name}, rows {bad[:5].tolist()})"
        )
    return TrainTarget(u_target=u_target, stage=stage, delta_used=delta_used, kind=kind)
