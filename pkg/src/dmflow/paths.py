"""Probability-path construction and the closed-form Gaussian oracle.

The training path is the straight line ``z_t = (1-t) z0 + t eps`` between a
data point and unit Gaussian noise; its conditional velocity is
``eps - z0``.  For standard-normal data the marginal flow is available in
closed form, which makes every average-velocity identity exactly checkable:

* marginals are ``N(0, sigma(t)^2 I)`` with ``sigma(t)^2 = (1-t)^2 + t^2``,
* the marginal velocity field is ``v(z, t) = z (2t - 1) / sigma(t)^2``,
* flow trajectories are ``z(s) = z(t) sigma(s) / sigma(t)``, hence the
  average velocity over ``[r, t]`` is ``z (1 - sigma(r)/sigma(t)) / (t-r)``.

The oracle is restricted to standard-normal data on purpose: it is the one
case with a simple closed form, and it is enough to exercise every formula.

Also here: the softmax-kernel "stable target" velocity (a variance-reduced
replacement for the conditional velocity built from a reference sub-batch)
and the named toy dataset generators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_MIN = 1e-5  # lower clamp wherever 1/t or the time warp appears


@dataclass(frozen=True)
class PathSample:
    """One batch of training tuples on the linear interpolation path."""

    z0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    r: np.ndarray
    zt: np.ndarray
    vt: np.ndarray


def interpolate(z0, eps, t, r) -> PathSample:
    """Build a :class:`PathSample` with ``z_t = (1-t) z0 + t eps``."""
    z0, eps = np.asarray(z0, float), np.asarray(eps, float)
    t, r = np.asarray(t, float), np.asarray(r, float)
    if z0.shape != eps.shape or z0.ndim != 2:
        raise ValueError(f"z0/eps must be matching [B x d] arrays, got {z0.shape}, {eps.shape}")
    if t.shape != (z0.shape[0],) or r.shape != t.shape:
        raise ValueError("t and r must be 1-D, one entry per row")
    if np.any(r > t):
        raise ValueError("requires r <= t elementwise")
    if np.any(t < 0.0) or np.any(t > 1.0) or np.any(r < 0.0):
        raise ValueError("times must lie in [0, 1]")
    tc = t[:, None]
    zt = (1.0 - tc) * z0 + tc * eps
    return PathSample(z0=z0, eps=eps, t=t, r=r, zt=zt, vt=eps - z0)


def conditional_velocity(sample: PathSample) -> np.ndarray:
    """``eps - z0``; independent of t by construction."""
    return sample.eps - sample.z0


def stable_target_velocity(zt, t, refs) -> np.ndarray:
    """Softmax-kernel velocity over a reference set of clean samples.

    ``refs`` is either a shared ``[(K+1) x d]`` reference matrix applied to
    every row, or per-sample references ``[B x (K+1) x d]``; by convention
    row 0 holds the sample's own z0, so a single-reference set reduces to
    the conditional velocity.  Weights are a softmax over
    ``-|zt - (1-t) x_k|^2 / (2 t^2)`` with max-subtracted logits (they
    scale as 1/t^2 and would overflow otherwise).
    """
    zt, t = np.asarray(zt, float), np.asarray(t, float)
    refs = np.asarray(refs, float)
    if np.any(t <= T_MIN):
        raise ValueError("stable target undefined at t -> 0")
    if refs.ndim == 2:
        refs = np.broadcast_to(refs[None, :, :], (zt.shape[0],) + refs.shape)
    elif refs.ndim != 3 or refs.shape[0] != zt.shape[0]:
        raise ValueError(f"refs must be [(K+1) x d] or [B x (K+1) x d], got {refs.shape}")
    tc = t[:, None, None]
    diff = zt[:, None, :] - (1.0 - tc) * refs  # [B, K+1, d]
    logits = -np.sum(diff * diff, axis=2) / (2.0 * t[:, None] ** 2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    xbar = np.einsum("bk,bkd->bd", w, refs)
    return (zt - xbar) / t[:, None]


def oracle_sigma(t):
    """Marginal standard deviation ``sqrt((1-t)^2 + t^2)`` on [0, 1]."""
    t = np.asarray(t, float)
    return np.sqrt((1.0 - t) ** 2 + t**2)


def oracle_marginal_velocity(z, t):
    """True velocity field ``z (2t-1) / sigma(t)^2`` for standard-normal data."""
    z, t = np.asarray(z, float), np.asarray(t, float)
    return z * ((2.0 * t - 1.0) / oracle_sigma(t) ** 2)


def oracle_average_velocity(z, r: float, t: float):
    """Closed-form average velocity ``z (1 - sigma(r)/sigma(t)) / (t - r)``.

    Collapses to the marginal velocity when ``t - r`` vanishes (the
    instantaneous limit).
    """
    z = np.asarray(z, float)
    r, t = float(r), float(t)
    if r > t + 1e-12:
        raise ValueError("requires r <= t")
    if t - r < 1e-12:
        return oracle_marginal_velocity(z, t)
    return z * ((1.0 - oracle_sigma(r) / oracle_sigma(t)) / (t - r))


class GaussianFlowOracle:
    """Exact average-velocity model for standard-normal data.

    Exposes the same ``forward`` / ``forward_jvp`` pair as the trained
    network, with per-row times, so it can stand in wherever a model
    snapshot is expected.
    """

    def __init__(self, data_dim: int):
        self.data_dim = int(data_dim)

    @staticmethod
    def _coeff(r, t):
        # c(r, t) with the diagonal handled by its limit (2t-1)/sigma^2
        dt = t - r
        sig_t = oracle_sigma(t)
        near = dt < 1e-12
        dt_safe = np.where(near, 1.0, dt)
        c = (1.0 - oracle_sigma(r) / sig_t) / dt_safe
        return np.where(near, (2.0 * t - 1.0) / sig_t**2, c)

    @staticmethod
    def _coeff_dt(r, t):
        # dc/dt; switches to the series limit near the diagonal where the
        # general expression loses all significant digits
        dt = t - r
        sig_r, sig_t = oracle_sigma(r), oracle_sigma(t)
        dsig_t = (2.0 * t - 1.0) / sig_t
        near = dt < 1e-6
        dt_safe = np.where(near, 1.0, dt)
        general = (sig_r * dsig_t / sig_t**2 * dt_safe - (1.0 - sig_r / sig_t)) / dt_safe**2
        dsig_r = (2.0 * r - 1.0) / sig_r
        ddsig_r = 2.0 / sig_r - (2.0 * r - 1.0) ** 2 / sig_r**3
        limit = ddsig_r / (2.0 * sig_r) - (dsig_r / sig_r) ** 2
        return np.where(near, limit, general)

    def _check(self, z, r, t):
        z = np.asarray(z, float)
        r = np.broadcast_to(np.asarray(r, float), (z.shape[0],))
        t = np.broadcast_to(np.asarray(t, float), (z.shape[0],))
        if z.ndim != 2 or z.shape[1] != self.data_dim:
            raise ValueError(f"z must be [B x {self.data_dim}], got {z.shape}")
        if np.any(r > t + 1e-12):
            raise ValueError("requires r <= t elementwise")
        return z, r, t

    def forward(self, z, r, t):
        z, r, t = self._check(z, r, t)
        return z * self._coeff(r, t)[:, None]

    def forward_jvp(self, z, r, t, v):
        z, r, t = self._check(z, r, t)
        v = np.asarray(v, float)
        c = self._coeff(r, t)[:, None]
        u = z * c
        dudt = v * c + z * self._coeff_dt(r, t)[:, None]
        return u, dudt


# ---------------------------------------------------------------------------
# toy datasets, addressable by name; parameters are part of the interface
# so reported numbers stay reproducible
# ---------------------------------------------------------------------------

RING_RADIUS = 2.0
RING_STD = 0.1
RING_MODES = 8
MOONS_NOISE = 0.05


def ring_centers() -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(RING_MODES) / RING_MODES
    return RING_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)


class DatasetSampler:
    """Named generator drawing fresh batches from a fixed toy distribution."""

    def __init__(self, name: str, dim: int, draw):
        self.name = name
        self.dim = dim
        self._draw = draw

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self._draw(n, rng)


def make_sampler(name: str, d: int = 2) -> DatasetSampler:
    """``gauss`` (standard normal, any d), ``gmm-ring`` and ``two-moons`` (d=2)."""
    if name == "gauss":
        return DatasetSampler(name, d, lambda n, rng: rng.standard_normal((n, d)))
    if name == "gmm-ring":
        if d != 2:
            raise ValueError("gmm-ring is 2-D")
        centers = ring_centers()

        def draw_ring(n, rng):
            idx = rng.integers(0, RING_MODES, size=n)
            return centers[idx] + RING_STD * rng.standard_normal((n, 2))

        return DatasetSampler(name, 2, draw_ring)
    if name == "two-moons":
        if d != 2:
            raise ValueError("two-moons is 2-D")

        def draw_moons(n, rng):
            upper = rng.integers(0, 2, size=n).astype(bool)
            theta = rng.uniform(0.0, np.pi, size=n)
            x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
            y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
            return np.stack([x, y], axis=1) + MOONS_NOISE * rng.standard_normal((n, 2))

        return DatasetSampler(name, 2, draw_moons)
    raise ValueError(f"unknown dataset {name!r} (expected gauss, gmm-ring or two-moons)")
