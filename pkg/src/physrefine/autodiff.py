"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

Deliberately small: just enough primitives to express temporal convolution
networks, rigid-body kinematics/dynamics and quadratic losses, all in double
precision on the CPU. Values live in numpy arrays; the tape is a DAG of
`Tensor` nodes whose backward closures return gradients for their parents.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "NotScalar",
    "ShapeMismatch",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "backward",
    "finite_diff_check",
    "FiniteDiffReport",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class NotScalar(ValueError):
    """backward() was called on a non-scalar tensor."""


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested primitive."""


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus optional provenance on the gradient tape.

    Leaves are created with ``requires_grad=True``; results of primitives
    carry a backward closure and references to their parents. A tensor
    produced under ``no_grad()`` (or from constant parents) is detached.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # Keep numpy from elementwise-consuming Tensor operands so that
    # ndarray <op> Tensor falls through to the reflected methods below.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Detached copy of the values."""
        return np.array(self.data, dtype=np.float64)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def grad_value(self) -> np.ndarray:
        """Gradient as an array; a never-touched (disconnected) leaf is zero."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    if type(x) is Tensor:
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=np.float64)
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    return t


def custom_op(data, parents, bwd) -> Tensor:
    """Build a taped node with a hand-written backward rule.

    ``bwd(g)`` must return one gradient (or None) per parent, in order.
    """
    return _result(np.asarray(data, dtype=np.float64), tuple(parents), bwd)


def _result(data: np.ndarray, parents: tuple, bwd) -> Tensor:
    """Assemble an op result, recording provenance only when it matters."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic primitives ----------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _result(data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _result(data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    if not (_grad_enabled and (a.requires_grad or b.requires_grad)):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _result(data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            if b.requires_grad
            else None
        )
        return (ga, gb)

    return _result(data, (a, b), bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _result(-a.data, (a,), bwd)


def power(a, exponent: float):
    a = as_tensor(a)
    c = float(exponent)
    data = a.data**c

    def bwd(g):
        return (g * c * a.data ** (c - 1.0),)

    return _result(data, (a,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeMismatch("matmul requires operands of rank >= 1")
    data = ad @ bd

    def bwd(g):
        ga = gb = None
        if ad.ndim == 1 and bd.ndim == 1:  # dot product
            if a.requires_grad:
                ga = g * bd
            if b.requires_grad:
                gb = g * ad
        elif bd.ndim == 1:  # (..., m, n) @ (n,)
            if a.requires_grad:
                ga = np.expand_dims(g, -1) * bd
                ga = _unbroadcast(ga, ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(
                    (np.expand_dims(g, -1) * ad).sum(axis=-2).reshape(-1, bd.shape[0]).sum(axis=0)
                    if ad.ndim > 2
                    else ad.T @ g,
                    bd.shape,
                )
        elif ad.ndim == 1:  # (n,) @ (..., n, k)
            if a.requires_grad:
                ga = _unbroadcast(
                    (bd @ np.expand_dims(g, -1)).squeeze(-1), ad.shape
                )
            if b.requires_grad:
                gb = _unbroadcast(np.expand_dims(ad, -1) * np.expand_dims(g, -2), bd.shape)
        else:  # matrix @ matrix, possibly batched
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return (ga, gb)

    return _result(data, (a, b), bwd)


# -- shape primitives ---------------------------------------------------------


def _is_basic_index(idx) -> bool:
    if isinstance(idx, (int, np.integer, slice)):
        return True
    if isinstance(idx, tuple):
        return all(isinstance(i, (int, np.integer, slice)) for i in idx)
    return False


def getitem(a, idx):
    a = as_tensor(a)
    data = a.data[idx]
    if np.isscalar(data):
        data = np.asarray(data)
    basic = _is_basic_index(idx)

    def bwd(g):
        gx = np.zeros_like(a.data)
        if basic:
            # basic indexing never aliases, so a direct accumulate is safe
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(data, (a,), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _result(data, (a,), bwd)


def concat(parts, axis: int = 0):
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(
            pieces[i] if parts[i].requires_grad else None for i in range(len(parts))
        )

    return _result(data, tuple(parts), bwd)


def stack(parts, axis: int = 0):
    parts = [as_tensor(p) for p in parts]
    data = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        pieces = np.split(g, len(parts), axis=axis)
        return tuple(
            pieces[i].squeeze(axis) if parts[i].requires_grad else None
            for i in range(len(parts))
        )

    return _result(data, tuple(parts), bwd)


def tsum(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if np.isscalar(data):
        data = np.asarray(data)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _result(data, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = 1
        for ax in axis:
            n *= a.data.shape[ax]
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- elementwise transcendentals ----------------------------------------------


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return _result(data, (a,), bwd)


def log(a):
    a = as_tensor(a)

    def bwd(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), bwd)


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / data),)

    return _result(data, (a,), bwd)


def sin(a):
    a = as_tensor(a)

    def bwd(g):
        return (g * np.cos(a.data),)

    return _result(np.sin(a.data), (a,), bwd)


def cos(a):
    a = as_tensor(a)

    def bwd(g):
        return (-g * np.sin(a.data),)

    return _result(np.cos(a.data), (a,), bwd)


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - data * data),)

    return _result(data, (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _result(data, (a,), bwd)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), bwd)


def arccos(a):
    a = as_tensor(a)
    data = np.arccos(a.data)

    def bwd(g):
        return (-g / np.sqrt(1.0 - a.data * a.data),)

    return _result(data, (a,), bwd)


def atan2(y, x):
    y, x = as_tensor(y), as_tensor(x)
    data = np.arctan2(y.data, x.data)
    denom = x.data * x.data + y.data * y.data

    def bwd(g):
        gy = _unbroadcast(g * x.data / denom, y.data.shape) if y.requires_grad else None
        gx = _unbroadcast(-g * y.data / denom, x.data.shape) if x.requires_grad else None
        return (gy, gx)

    return _result(data, (y, x), bwd)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(g * take_a, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ~take_a, b.data.shape) if b.requires_grad else None
        return (ga, gb)

    return _result(data, (a, b), bwd)


# -- linear algebra -----------------------------------------------------------


def solve_spd(a, b):
    """Solve A x = b for symmetric positive-definite A via factorisation.

    The Cholesky factor certifies positive definiteness; the solve itself
    never forms an explicit inverse. Backward follows the standard implicit
    rule grad_b = A^{-T} g, grad_A = -grad_b x^T.
    """
    a, b = as_tensor(a), as_tensor(b)
    np.linalg.cholesky(a.data)  # raises LinAlgError when not SPD
    x = np.linalg.solve(a.data, b.data)

    def bwd(g):
        gb = np.linalg.solve(a.data.T, g)
        ga = None
        if a.requires_grad:
            ga = -np.outer(gb, x) if x.ndim == 1 else -(gb @ x.T)
        return (ga, gb if b.requires_grad else None)

    return _result(x, (a, b), bwd)


# -- convolution --------------------------------------------------------------


def conv1d(x, w, bias=None, dilation: int = 1):
    """1-D convolution over (batch, channels, length) with dilation.

    No implicit padding; pad explicitly beforehand. Kernel taps are spaced
    ``dilation`` samples apart, so the output length is
    ``L - (K - 1) * dilation``.
    """
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 3:
        raise ShapeMismatch("conv1d expects x (B,C,L) and w (O,C,K)")
    b_, c_in, length = xd.shape
    c_out, c_in_w, k = wd.shape
    if c_in != c_in_w:
        raise ShapeMismatch(f"conv1d channel mismatch: {c_in} vs {c_in_w}")
    span = (k - 1) * dilation + 1
    if length < span:
        raise ShapeMismatch(f"conv1d input length {length} < kernel span {span}")
    l_out = length - span + 1
    idx = np.arange(l_out)[:, None] + np.arange(k)[None, :] * dilation
    cols = xd[:, :, idx]  # (B, C, L_out, K)
    data = np.einsum("bclk,ock->bol", cols, wd, optimize=True)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        data = data + bias.data[None, :, None]
        parents.append(bias)

    def bwd(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.einsum("bol,ock->bclk", g, wd, optimize=True)
            gx = np.zeros_like(xd)
            np.add.at(gx, (slice(None), slice(None), idx), gcols)
        if w.requires_grad:
            gw = np.einsum("bol,bclk->ock", g, cols, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        out = (gx, gw)
        if bias is not None:
            out = out + (gb,)
        return out

    return _result(data, tuple(parents), bwd)


def replication_pad1d(x, pad: int):
    """Pad the last axis of (B, C, L) by repeating the edge samples."""
    x = as_tensor(x)
    if pad == 0:
        return x
    parts = [x[:, :, 0:1]] * pad + [x] + [x[:, :, -1:]] * pad
    return concat(parts, axis=2)


# -- backward pass ------------------------------------------------------------


def _topo_order(root: Tensor):
    order = []
    visited = {id(root)}
    stack = [(root, 0)]
    while stack:
        node, i = stack[-1]
        parents = node._parents
        if i < len(parents):
            stack[-1] = (node, i + 1)
            child = parents[i]
            if child.requires_grad and id(child) not in visited:
                visited.add(id(child))
                stack.append((child, 0))
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor):
    """Propagate d(loss)/d(leaf) into ``grad`` of every tracked leaf.

    Repeated calls accumulate; clear with ``zero_grad``. Leaves not on the
    tape of ``loss`` keep a zero (None) gradient.
    """
    if not isinstance(loss, Tensor):
        raise NotScalar("backward() needs a Tensor")
    if loss.data.size != 1:
        raise NotScalar(f"backward() needs a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            acc = grads.get(key)
            grads[key] = pg if acc is None else acc + pg


# -- gradient verification ----------------------------------------------------


class FiniteDiffReport:
    """Per-component comparison of analytic vs central-difference gradients."""

    def __init__(self, analytic, numeric, abs_err, rel_err, passed, rel_tol):
        self.analytic = analytic
        self.numeric = numeric
        self.abs_err = abs_err
        self.rel_err = rel_err
        self.passed = passed
        self.rel_tol = rel_tol

    @property
    def ok(self) -> bool:
        return bool(np.all(self.passed))

    @property
    def max_rel_err(self) -> float:
        return float(np.max(self.rel_err)) if self.rel_err.size else 0.0

    @property
    def max_abs_err(self) -> float:
        return float(np.max(self.abs_err)) if self.abs_err.size else 0.0

    def __repr__(self):
        status = "ok" if self.ok else "FAIL"
        return (
            f"FiniteDiffReport({status}, max_rel={self.max_rel_err:.3e}, "
            f"max_abs={self.max_abs_err:.3e})"
        )


def finite_diff_check(f, x: Tensor, rel_tol: float = 1e-5, abs_tol: float = 1e-7) -> FiniteDiffReport:
    """Check d f / d x against central finite differences.

    ``f`` must map a Tensor to a scalar Tensor and be evaluable at perturbed
    inputs. Steps are ``1e-6 * max(1, |x_i|)`` per component. A component
    passes when either the absolute or the relative error is within
    tolerance (tiny gradients drown in difference noise otherwise).
    """
    x_work = Tensor(x.data.copy(), requires_grad=True)
    out = f(x_work)
    if out.data.size != 1:
        raise NotScalar("finite_diff_check needs a scalar-valued f")
    x_work.zero_grad()
    backward(out)
    analytic = x_work.grad_value().copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            h = 1e-6 * max(1.0, abs(flat[i]))
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            fp = float(f(Tensor(xp.reshape(x.data.shape))).data)
            fm = float(f(Tensor(xm.reshape(x.data.shape))).data)
            numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)
    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    rel_err = abs_err / denom
    passed = (abs_err <= abs_tol) | (rel_err <= rel_tol)
    return FiniteDiffReport(analytic, numeric, abs_err, rel_err, passed, rel_tol)


# -- parameter checkpoints ------------------------------------------------------

CHECKPOINT_MAGIC = "physrefine-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, named_tensors: dict):
    """Write named tensors as versioned structured text.

    One ``tensor`` record per entry: name, shape, then the values on a single
    line with 17 significant digits (lossless float64 round-trip, no byte
    order concerns).
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n")
        for name, t in named_tensors.items():
            arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"tensor {name} {arr.ndim} {dims}\n")
            fh.write(" ".join(f"{v:.17g}" for v in arr.reshape(-1)) + "\n")
        fh.write("end\n")


def load_checkpoint(path) -> dict:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint file")
        if header != f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}":
            raise CheckpointError(f"{path}: unsupported version {header!r}")
        while True:
            line = fh.readline()
            if not line:
                raise CheckpointError(f"{path}: missing end marker")
            line = line.strip()
            if line == "end":
                break
            if not line.startswith("tensor "):
                raise CheckpointError(f"{path}: unexpected record {line!r}")
            fields = line.split()
            name = fields[1]
            ndim = int(fields[2])
            shape = tuple(int(d) for d in fields[3 : 3 + ndim])
            values = fh.readline()
            arr = np.array([float(v) for v in values.split()], dtype=np.float64)
            expect = int(np.prod(shape)) if shape else 1
            if arr.size != expect:
                raise CheckpointError(
                    f"{path}: tensor {name} has {arr.size} values, expected {expect}"
                )
            out[name] = arr.reshape(shape)
    return out
