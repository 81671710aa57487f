"""Dense tensor ops and dual-number forward-mode differentiation.

Tensors are plain float64 numpy arrays (row-major, ``shape`` + flat buffer).
All public ops validate shapes: operands must have equal shapes, except that
a scalar, a trailing-axis vector (shape ``(d,)`` against ``(..., d)``) or an
explicit size-1 axis may broadcast.  Everything is 64-bit; the curriculum
targets subtract nearly-equal quantities at small step sizes and would be
unreliable in float32.

Forward-mode differentiation is carried by :class:`DualTensor`, a
(primal, tangent) pair.  Each supported primitive propagates the tangent as
the exact directional derivative, so composing primitives on duals yields
the Jacobian-vector product of the composition.  The primitive table is
deliberately small: add, sub, mul, neg, matmul, affine, SiLU, sin, cos,
concat and basic indexing.  Anything else raises.

Primal values computed through a DualTensor use the same numpy expressions
as the plain-array path, so a dual evaluation is bit-identical to an
ordinary one.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

Tensor = np.ndarray


class NonFiniteError(ValueError):
    """A value that must be finite (target, loss, gradient) is NaN/Inf."""


class UnsupportedPrimitiveError(TypeError):
    """Operation outside the supported forward-mode primitive table."""


def as_tensor(x) -> Tensor:
    """Coerce to a float64 array (no copy when already one)."""
    return np.asarray(x, dtype=np.float64)


def _broadcast_ok(a: Tensor, b: Tensor) -> bool:
    # equal shapes | scalar | trailing-axis vector | explicit size-1 axis
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return True
    lo, hi = (a, b) if a.ndim < b.ndim else (b, a)
    if lo.ndim == 1 and hi.ndim >= 1 and hi.shape[-1] == lo.shape[0]:
        return True
    if a.ndim == b.ndim and all(
        m == n or m == 1 or n == 1 for m, n in zip(a.shape, b.shape)
    ):
        return True
    return False


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if not _broadcast_ok(a, b):
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def elementwise(op: str, a, b=None) -> Tensor:
    """Elementwise arithmetic with shape validation.

    ``op`` is one of ``add | sub | mul | neg``; ``neg`` is unary.
    """
    a = as_tensor(a)
    if op == "neg":
        if b is not None:
            raise ValueError("neg is unary")
        return -a
    if b is None:
        raise ValueError(f"{op} needs two operands")
    b = as_tensor(b)
    _check_pair(op, a, b)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a, b) -> Tensor:
    """Matrix product with explicit inner-dimension validation."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return a @ b


class DualTensor:
    """(primal, tangent) pair; tangents follow the pushforward of each op.

    Mixing with plain arrays/scalars treats them as constants (zero
    tangent).  Division and powers are not part of the primitive table.
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        self.primal = as_tensor(primal)
        self.tangent = as_tensor(tangent)
        if self.primal.shape != self.tangent.shape:
            raise ValueError(
                f"primal/tangent shapes differ: {self.primal.shape} vs {self.tangent.shape}"
            )

    @property
    def shape(self):
        return self.primal.shape

    def __add__(self, other):
        if isinstance(other, DualTensor):
            _check_pair("add", self.primal, other.primal)
            return DualTensor(self.primal + other.primal, self.tangent + other.tangent)
        other = as_tensor(other)
        _check_pair("add", self.primal, other)
        return DualTensor(self.primal + other, np.broadcast_to(self.tangent, np.broadcast_shapes(self.shape, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DualTensor):
            _check_pair("sub", self.primal, other.primal)
            return DualTensor(self.primal - other.primal, self.tangent - other.tangent)
        other = as_tensor(other)
        _check_pair("sub", self.primal, other)
        return DualTensor(self.primal - other, np.broadcast_to(self.tangent, np.broadcast_shapes(self.shape, other.shape)))

    def __rsub__(self, other):
        other = as_tensor(other)
        _check_pair("sub", self.primal, other)
        return DualTensor(other - self.primal, np.broadcast_to(-self.tangent, np.broadcast_shapes(self.shape, other.shape)))

    def __neg__(self):
        return DualTensor(-self.primal, -self.tangent)

    def __mul__(self, other):
        if isinstance(other, DualTensor):
            _check_pair("mul", self.primal, other.primal)
            return DualTensor(
                self.primal * other.primal,
                self.tangent * other.primal + self.primal * other.tangent,
            )
        other = as_tensor(other)
        _check_pair("mul", self.primal, other)
        return DualTensor(self.primal * other, self.tangent * other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, DualTensor):
            return DualTensor(
                matmul(self.primal, other.primal),
                matmul(self.tangent, other.primal) + matmul(self.primal, other.tangent),
            )
        other = as_tensor(other)
        return DualTensor(matmul(self.primal, other), matmul(self.tangent, other))

    def __rmatmul__(self, other):
        other = as_tensor(other)
        return DualTensor(matmul(other, self.primal), matmul(other, self.tangent))

    def __getitem__(self, idx):
        return DualTensor(self.primal[idx], self.tangent[idx])

    def __truediv__(self, other):
        raise UnsupportedPrimitiveError("division is not a supported dual primitive")

    __rtruediv__ = __truediv__

    def __pow__(self, other):
        raise UnsupportedPrimitiveError("pow is not a supported dual primitive")

    def __repr__(self):
        return f"DualTensor(shape={self.primal.shape})"


def silu(x):
    """SiLU ``x * sigmoid(x)``; tangent uses the analytic derivative."""
    if isinstance(x, DualTensor):
        s = expit(x.primal)
        return DualTensor(x.primal * s, s * (1.0 + x.primal * (1.0 - s)) * x.tangent)
    x = as_tensor(x)
    return x * expit(x)


def silu_grad(x: Tensor) -> Tensor:
    """d silu / dx, used by the reverse-mode training path."""
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def sin(x):
    if isinstance(x, DualTensor):
        return DualTensor(np.sin(x.primal), np.cos(x.primal) * x.tangent)
    return np.sin(as_tensor(x))


def cos(x):
    if isinstance(x, DualTensor):
        return DualTensor(np.cos(x.primal), -np.sin(x.primal) * x.tangent)
    return np.cos(as_tensor(x))


def affine(x, w, b):
    """``x @ w + b`` for plain or dual ``x`` (w, b are constants)."""
    if isinstance(x, DualTensor):
        return DualTensor(matmul(x.primal, w) + b, matmul(x.tangent, w))
    return matmul(x, w) + b


def concat(parts, axis: int = 1):
    """Concatenate plain arrays or DualTensors (mixing allowed; plain
    parts get zero tangent)."""
    if any(isinstance(p, DualTensor) for p in parts):
        primals = [p.primal if isinstance(p, DualTensor) else as_tensor(p) for p in parts]
        tangents = [
            p.tangent if isinstance(p, DualTensor) else np.zeros_like(as_tensor(p))
            for p in parts
        ]
        return DualTensor(
            np.concatenate(primals, axis=axis), np.concatenate(tangents, axis=axis)
        )
    return np.concatenate([as_tensor(p) for p in parts], axis=axis)


def dual_forward(f, primal_in, tangent_in) -> DualTensor:
    """Push (primal, tangent) through ``f`` built from supported primitives.

    Returns the full output pair: primal ``f(primal_in)`` and tangent
    ``J_f(primal_in) @ tangent_in``.
    """
    primal_in, tangent_in = as_tensor(primal_in), as_tensor(tangent_in)
    if primal_in.shape != tangent_in.shape:
        raise ValueError("primal and tangent must share a shape")
    out = f(DualTensor(primal_in, tangent_in))
    if not isinstance(out, DualTensor):
        raise UnsupportedPrimitiveError(
            "function escaped the dual primitive table (returned a plain value)"
        )
    return out
