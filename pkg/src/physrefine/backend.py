"""Type dispatch between plain numpy arrays and taped tensors.

Kinematics and dynamics are written once against this module: fed numpy they
run at plain-numpy speed (the per-frame refinement path), fed tensors they
record the tape needed for end-to-end training. Operators (+, -, *, @) come
from the operand types themselves; everything else goes through here.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_EYE3 = np.eye(3)
# Basis of the cross-product map: skew(v) = v0*E0 + v1*E1 + v2*E2.
_SKEW_BASIS = np.array(
    [
        [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ]
)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x) -> np.ndarray:
    """Underlying numpy values, whatever the carrier type."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def sin(x):
    return ad.sin(x) if isinstance(x, Tensor) else np.sin(x)


def cos(x):
    return ad.cos(x) if isinstance(x, Tensor) else np.cos(x)


def sqrt(x):
    return ad.sqrt(x) if isinstance(x, Tensor) else np.sqrt(x)


def exp(x):
    return ad.exp(x) if isinstance(x, Tensor) else np.exp(x)


def log(x):
    return ad.log(x) if isinstance(x, Tensor) else np.log(x)


def tanh(x):
    return ad.tanh(x) if isinstance(x, Tensor) else np.tanh(x)


def arccos(x):
    return ad.arccos(x) if isinstance(x, Tensor) else np.arccos(x)


def atan2(y, x):
    if isinstance(y, Tensor) or isinstance(x, Tensor):
        return ad.atan2(y, x)
    return np.arctan2(y, x)


def relu(x):
    return ad.relu(x) if isinstance(x, Tensor) else np.maximum(x, 0.0)


def maximum(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ad.maximum(a, b)
    return np.maximum(a, b)


def concat(parts, axis: int = 0):
    if any(isinstance(p, Tensor) for p in parts):
        return ad.concat(parts, axis=axis)
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in parts], axis=axis)


def stack(parts, axis: int = 0):
    if any(isinstance(p, Tensor) for p in parts):
        return ad.stack(parts, axis=axis)
    return np.stack(parts, axis=axis)


def reshape(x, shape):
    if isinstance(x, Tensor):
        return ad.reshape(x, shape)
    return np.reshape(x, shape)


def transpose(x, axes=None):
    if isinstance(x, Tensor):
        return ad.transpose(x, axes)
    return np.transpose(x, axes)


def tsum(x, axis=None):
    if isinstance(x, Tensor):
        return ad.tsum(x, axis=axis)
    return np.sum(x, axis=axis)


def dot(a, b):
    return a @ b


def outer(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ad.matmul(reshape(a, (-1, 1)), reshape(b, (1, -1)))
    return np.outer(a, b)


def skew(v):
    """3x3 cross-product matrix of a 3-vector."""
    if isinstance(v, Tensor):
        return v[0] * _SKEW_BASIS[0] + v[1] * _SKEW_BASIS[1] + v[2] * _SKEW_BASIS[2]
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def cross3(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return skew(a) @ b
    return np.cross(a, b)


def solve_spd(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ad.solve_spd(a, b)
    np.linalg.cholesky(a)
    return np.linalg.solve(a, b)


def norm(x, eps: float = 0.0):
    """Euclidean norm; optional epsilon keeps the gradient finite at zero."""
    s = tsum(x * x)
    if eps:
        s = s + eps
    return sqrt(s)


def eye3():
    return _EYE3
