"""Regression losses between the model output and the stage target.

Per-row squared error is the mean over dimensions, ``e2 = mean_d (pred -
target)^2``, so the constants below do not need retuning across
dimensionalities.  Three kinds:

* ``mse``       - per_sample = e2
* ``adaptive``  - per_sample = w * e2 with w = (e2 + c)^(-p); the weight is
                  treated as a constant (no gradient flows through it)
* ``cauchy``    - per_sample = c^2 * log(1 + e2 / c^2); bounded influence,
                  d(per_sample)/d(e2) = 1 / (1 + e2/c^2) <= 1

The scalar loss is the mean over rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError

LOSS_KINDS = ("mse", "adaptive", "cauchy")


@dataclass
class LossConfig:
    kind: str = "mse"
    p: float = 0.75
    c: float = 0.001

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not 0.0 < self.p <= 1.5:
            raise ValueError("adaptive exponent p must lie in (0, 1.5]")
        if self.c <= 0.0:
            raise ValueError("loss constant c must be positive")


def _check_finite(name, x):
    bad = ~np.all(np.isfinite(x), axis=tuple(range(1, x.ndim)))
    if np.any(bad):
        rows = np.where(bad)[0]
        raise NonFiniteError(f"non-finite {name} at rows {rows[:8].tolist()}")


def loss(pred, target, cfg: LossConfig):
    """Scalar loss and per-row values."""
    scalar, per_sample, _ = loss_and_grad(pred, target, cfg)
    return scalar, per_sample


def loss_and_grad(pred, target, cfg: LossConfig):
    """Loss plus its gradient w.r.t. ``pred`` (adaptive weight frozen).

    Returns ``(scalar, per_sample, grad_pred)``.
    """
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"pred/target must be matching [B x d], got {pred.shape}, {target.shape}")
    _check_finite("prediction", pred)
    _check_finite("target", target)
    B, d = pred.shape
    resid = pred - target
    e2 = np.mean(resid * resid, axis=1)
    de2_dpred = 2.0 * resid / d

    if cfg.kind == "mse":
        per_sample = e2
        dl_de2 = np.ones(B)
    elif cfg.kind == "adaptive":
        w = (e2 + cfg.c) ** (-cfg.p)  # stop-gradient weight
        per_sample = w * e2
        dl_de2 = w
    else:  # cauchy
        c2 = cfg.c * cfg.c
        per_sample = c2 * np.log1p(e2 / c2)
        dl_de2 = 1.0 / (1.0 + e2 / c2)

    scalar = float(np.mean(per_sample))
    grad_pred = dl_de2[:, None] * de2_dpred / B
    return scalar, per_sample, grad_pred
