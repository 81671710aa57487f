"""Time-conditioned average-velocity network u(z, r, t).

An MLP over ``[z | embed(r) | embed(t)]`` with SiLU hidden layers and a
zero-initialised output layer, so a fresh model predicts exactly zero.
The two times are embedded separately with smooth sinusoidal features
(smoothness matters: the final curriculum stage differentiates the model
along the time axis).

The same graph runs on plain arrays and on :class:`~dmflow.tensor.DualTensor`
inputs, which is how ``forward_jvp`` gets its directional derivative: push
tangents ``(v, 0, 1)`` for ``(z, r, t)`` through the network.  The dual
primal path is bit-identical to ``forward``.

Training gradients use an ordinary hand-written reverse pass
(``forward_with_cache`` + ``backward``); only the objective's time
derivative is required to be forward-mode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import DualTensor, affine, concat, cos, silu, silu_grad, sin

CHECKPOINT_MAGIC = b"DMFCKPT1"


class NonFiniteParamsError(ValueError):
    pass


@dataclass
class ModelParams:
    """Weights, biases and the fixed embedding frequency table.

    The trainer owns the single mutable copy; ``copy()`` produces detached
    snapshots for target evaluation and EMA shadows.
    """

    weights: list
    biases: list
    freqs: np.ndarray
    emb_scale: float
    data_dim: int
    hidden_dims: tuple
    param_version: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            freqs=self.freqs.copy(),
            emb_scale=self.emb_scale,
            data_dim=self.data_dim,
            hidden_dims=tuple(self.hidden_dims),
            param_version=self.param_version,
        )

    def arrays(self):
        """Trainable arrays in a fixed order (weights then biases, per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    # convenience handles so target builders can take any object exposing
    # forward/forward_jvp (the analytic oracle implements the same pair)
    def forward(self, z, r, t):
        return forward(self, z, r, t)

    def forward_jvp(self, z, r, t, v):
        return forward_jvp(self, z, r, t, v)


def init_params(
    data_dim: int,
    hidden_dims=(256, 256, 256),
    n_freq: int = 16,
    emb_scale: float = 1.0,
    freq_max: float = 1000.0,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """He-style hidden layers, zero-initialised output layer."""
    if rng is None:
        rng = np.random.default_rng(0)
    freqs = np.logspace(0.0, np.log10(freq_max), n_freq)
    dims = [data_dim + 4 * n_freq, *hidden_dims, data_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    weights[-1][:] = 0.0
    return ModelParams(
        weights=weights,
        biases=biases,
        freqs=freqs,
        emb_scale=float(emb_scale),
        data_dim=int(data_dim),
        hidden_dims=tuple(int(h) for h in hidden_dims),
    )


def _embed(params: ModelParams, s):
    # s: [B] (plain or dual) -> [B, 2*n_freq]; smooth in s by construction
    ang = s[:, None] * params.freqs[None, :]
    return concat([sin(ang), cos(ang)], axis=1) * params.emb_scale


def _apply(params: ModelParams, z, r, t):
    h = concat([z, _embed(params, r), _embed(params, t)], axis=1)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = affine(h, w, b)
        if i != last:
            h = silu(h)
    return h


def _check_inputs(params: ModelParams, z, r, t, v=None):
    z, r, t = np.asarray(z, float), np.asarray(r, float), np.asarray(t, float)
    if z.ndim != 2 or z.shape[1] != params.data_dim:
        raise ValueError(f"z must be [B x {params.data_dim}], got {z.shape}")
    if r.shape != (z.shape[0],) or t.shape != (z.shape[0],):
        raise ValueError("r and t must be 1-D with one entry per row of z")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite network input")
    if np.any(r > t + 1e-12):
        raise ValueError("requires r <= t elementwise")
    if np.any(r < -1e-12) or np.any(t > 1.0 + 1e-12):
        raise ValueError("times must lie in [0, 1]")
    if v is not None:
        v = np.asarray(v, float)
        if v.shape != z.shape:
            raise ValueError(f"tangent v must match z shape {z.shape}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite tangent")
        return z, r, t, v
    return z, r, t


def forward(params: ModelParams, z, r, t) -> np.ndarray:
    """Evaluate u(z, r, t) for a batch; deterministic given (params, inputs)."""
    z, r, t = _check_inputs(params, z, r, t)
    return _apply(params, z, r, t)


def forward_jvp(params: ModelParams, z, r, t, v):
    """Primal output plus total time derivative along the tangent (v, 0, 1).

    Returns ``(u, dudt)`` where ``dudt = (du/dz) v + du/dt``; the primal is
    bit-identical to :func:`forward`.
    """
    z, r, t, v = _check_inputs(params, z, r, t, v)
    out = _apply(
        params,
        DualTensor(z, v),
        DualTensor(r, np.zeros_like(r)),
        DualTensor(t, np.ones_like(t)),
    )
    return out.primal, out.tangent


def forward_with_cache(params: ModelParams, z, r, t):
    """Forward pass retaining pre-activations for the reverse pass."""
    z, r, t = _check_inputs(params, z, r, t)
    h = concat([z, _embed(params, r), _embed(params, t)], axis=1)
    cache = {"inputs": [h], "preacts": []}
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b
        cache["preacts"].append(a)
        if i != last:
            h = silu(a)
            cache["inputs"].append(h)
        else:
            h = a
    return h, cache


def backward(params: ModelParams, cache, dout):
    """Parameter gradients for a scalar loss with ``dout = dL/d output``.

    Returns ``(dweights, dbiases)`` matching the layout of the params.
    """
    dws = [None] * len(params.weights)
    dbs = [None] * len(params.biases)
    g = np.asarray(dout, float)
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            g = g * silu_grad(cache["preacts"][i])
        x = cache["inputs"][i]
        dws[i] = x.T @ g
        dbs[i] = g.sum(axis=0)
        if i > 0:
            g = g @ params.weights[i].T
    return dws, dbs


def grad_norm(dws, dbs) -> float:
    total = 0.0
    for g in (*dws, *dbs):
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# checkpoint format: b"DMFCKPT1" | uint64 header length | JSON header |
# concatenated float64 array payloads in header order.
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path, seed: int | None = None) -> None:
    """Write a checkpoint; refuses to persist non-finite parameters."""
    if not params.all_finite():
        raise NonFiniteParamsError("refusing to write checkpoint with non-finite parameters")
    arrays = {"freqs": params.freqs}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    header = {
        "data_dim": params.data_dim,
        "hidden_dims": list(params.hidden_dims),
        "emb_scale": params.emb_scale,
        "param_version": params.param_version,
        "seed": seed,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=np.float64).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(params, meta)`` with the stored seed."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated checkpoint")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    n_layers = len(header["hidden_dims"]) + 1
    params = ModelParams(
        weights=[arrays[f"w{i}"] for i in range(n_layers)],
        biases=[arrays[f"b{i}"] for i in range(n_layers)],
        freqs=arrays["freqs"],
        emb_scale=float(header["emb_scale"]),
        data_dim=int(header["data_dim"]),
        hidden_dims=tuple(header["hidden_dims"]),
        param_version=int(header["param_version"]),
    )
    meta = {"seed": header.get("seed"), "param_version": params.param_version}
    return params, meta
