"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Define-by-run: ops executed while a Tape is active are recorded and can be
replayed backwards to accumulate gradients into leaf tensors. The tape is
rebuilt every training step, so graphs may freely depend on data.

Conventions:
  * all values are float64 ndarrays (scalars are 0-d arrays),
  * broadcasting follows numpy; gradients are un-broadcast by summation,
  * kinked ops (clamp, relu, abs) use subgradient 0 at the kink,
  * backward() accumulates into .grad; calling twice without zero_grad
    doubles leaf gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

_active_tape = None


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


def _f64(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array plus an optional gradient slot.

    Leaves are tensors created directly with requires_grad=True; tensors
    produced by ops reference the node that made them via _op_output.
    """

    __slots__ = ("data", "grad", "requires_grad", "_op_output")

    def __init__(self, data, requires_grad=False):
        self.data = _f64(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._op_output = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = "leaf" if (self.requires_grad and not self._op_output) else "node"
        return f"Tensor({tag}, shape={self.data.shape})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data, requires_grad=False)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records ops; replays them in reverse to propagate adjoints."""

    def __init__(self):
        # each node: (out, inputs tuple, backward fn taking out-adjoint,
        # returning per-input adjoints or None)
        self.nodes = []

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def backward(self, root):
        """Accumulate d(root)/d(leaf) into leaf .grad for every leaf on the tape.

        root must be scalar (0-d or size-1). Adjoints of interior nodes live
        only inside this call; repeated calls add another full contribution.
        """
        if root.data.size != 1:
            raise ShapeError(
                f"backward root must be scalar, got shape {root.data.shape}"
            )
        adjoint = {id(root): np.ones_like(root.data)}
        touched_leaves = {}
        for out, inputs, backward_fn in reversed(self.nodes):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            grads = backward_fn(g)
            for inp, ig in zip(inputs, grads):
                if ig is None:
                    continue
                if inp._op_output:
                    key = id(inp)
                    if key in adjoint:
                        adjoint[key] = adjoint[key] + ig
                    else:
                        adjoint[key] = ig
                elif inp.requires_grad:
                    key = id(inp)
                    if key in touched_leaves:
                        prev = touched_leaves[key]
                        prev_grad = prev.grad
                        prev.grad = prev_grad + ig
                    else:
                        touched_leaves[key] = inp
                        inp.grad = ig if inp.grad is None else inp.grad + ig

    def clear(self):
        self.nodes = []


def active_tape():
    return _active_tape


def _record(out, inputs, backward_fn):
    """Mark out as recorded if a tape is active and any input needs grad."""
    t = _active_tape
    if t is None:
        return out
    needed = False
    for inp in inputs:
        if inp.requires_grad or inp._op_output:
            needed = True
            break
    if not needed:
        return out
    out._op_output = True
    t.nodes.append((out, inputs, backward_fn))
    return out


def _needs(t):
    """True when a gradient for t must be produced (leaf or interior)."""
    return t.requires_grad or t._op_output


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops (broadcasting)
# ---------------------------------------------------------------------------

def add(a, b):
    out = Tensor(a.data + b.data)
    na, nb = _needs(a), _needs(b)

    def backward(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(g, b.data.shape) if nb else None)

    return _record(out, (a, b), backward)


def sub(a, b):
    out = Tensor(a.data - b.data)
    na, nb = _needs(a), _needs(b)

    def backward(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(-g, b.data.shape) if nb else None)

    return _record(out, (a, b), backward)


def mul(a, b):
    out = Tensor(a.data * b.data)
    na, nb = _needs(a), _needs(b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if na else None,
            _unbroadcast(g * a.data, b.data.shape) if nb else None,
        )

    return _record(out, (a, b), backward)


def div(a, b):
    out = Tensor(a.data / b.data)
    na, nb = _needs(a), _needs(b)

    def backward(g):
        inv = 1.0 / b.data
        return (
            _unbroadcast(g * inv, a.data.shape) if na else None,
            _unbroadcast(-g * a.data * inv * inv, b.data.shape) if nb else None,
        )

    return _record(out, (a, b), backward)


def neg(a):
    out = Tensor(-a.data)

    def backward(g):
        return (-g,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def exp(a):
    y = np.exp(a.data)
    out = Tensor(y)

    def backward(g):
        return (g * y,)

    return _record(out, (a,), backward)


def log(a):
    out = Tensor(np.log(a.data))

    def backward(g):
        return (g / a.data,)

    return _record(out, (a,), backward)


def sqrt(a):
    y = np.sqrt(a.data)
    out = Tensor(y)

    def backward(g):
        return (g * (0.5 / y),)

    return _record(out, (a,), backward)


def sigmoid(a):
    y = expit(a.data)
    out = Tensor(y)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _record(out, (a,), backward)


def softplus(a, beta=1.0):
    """(1/beta) * log(1 + exp(beta * x)), computed overflow-free."""
    z = beta * a.data
    y = (np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)) / beta
    out = Tensor(y)

    def backward(g):
        return (g * expit(z),)

    return _record(out, (a,), backward)


def relu(a):
    y = np.maximum(a.data, 0.0)
    out = Tensor(y)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _record(out, (a,), backward)


def abs_(a):
    out = Tensor(np.abs(a.data))

    def backward(g):
        return (g * np.sign(a.data),)

    return _record(out, (a,), backward)


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; subgradient 0 outside the open interval."""
    y = np.clip(a.data, lo, hi)
    out = Tensor(y)
    inside = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi

    def backward(g):
        return (g * inside,)

    return _record(out, (a,), backward)


def clamp_min(a, lo):
    return clamp(a, lo=lo)


# ---------------------------------------------------------------------------
# linear algebra / structure
# ---------------------------------------------------------------------------

def matmul(a, b):
    """a @ b with b 2-d; a may carry leading batch dimensions."""
    if b.data.ndim != 2:
        raise ShapeError(f"matmul rhs must be 2-d, got {b.data.shape}")
    if a.data.ndim < 1 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul mismatch {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    na, nb = _needs(a), _needs(b)

    def backward(g):
        ga = g @ b.data.T if na else None
        if nb:
            # fold all leading dims of a into rows for the weight gradient
            a2 = a.data.reshape(-1, a.data.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            gb = None
        return (ga, gb)

    return _record(out, (a, b), backward)


def transpose(a, axes=None):
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), backward)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _record(out, (a,), backward)


def concat(tensors, axis=-1):
    tensors = tuple(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(pieces)

    return _record(out, tensors, backward)


def narrow(a, axis, start, length):
    """Slice `length` entries starting at `start` along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record(out, (a,), backward)


def gather(a, index):
    """Rows of a by integer array index: out[k, ...] = a[index[k], ...].

    index may have any shape; trailing dims of a are carried along.
    Backward scatter-adds, so duplicate indices accumulate.
    """
    idx = np.asarray(index)
    out = Tensor(a.data[idx])
    nrows = a.data.shape[0]
    trailing = a.data.shape[1:]

    def backward(g):
        flat_idx = idx.reshape(-1)
        gflat = g.reshape(len(flat_idx), -1)
        cols = gflat.shape[1]
        # one histogram over (row, col) pairs beats a per-column loop
        pair = (flat_idx[:, None] * cols + np.arange(cols)).ravel()
        ga = np.bincount(pair, weights=gflat.ravel(), minlength=nrows * cols)
        return (ga.reshape((nrows,) + trailing),)

    return _record(out, (a,), backward)


def scatter_add(a, index, nrows):
    """out[i] = sum over k with index[k] == i of a[k, ...]; out has nrows rows."""
    idx = np.asarray(index).reshape(-1)
    trailing = a.data.shape[1:]
    aflat = a.data.reshape(len(idx), -1)
    cols = aflat.shape[1]
    pair = (idx[:, None] * cols + np.arange(cols)).ravel()
    y = np.bincount(pair, weights=aflat.ravel(), minlength=nrows * cols)
    out = Tensor(y.reshape((nrows,) + trailing))

    def backward(g):
        return (g[idx].reshape(a.data.shape),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and scans
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def backward(g):
        # broadcast views are safe: adjoint accumulation is out-of-place
        if axis is None:
            return (np.broadcast_to(g, shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def cumsum_exclusive(a, axis):
    """y[i] = sum of entries strictly before i along axis (y[0] = 0)."""
    inc = np.cumsum(a.data, axis=axis)
    out = Tensor(inc - a.data)

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return (rev - g,)

    return _record(out, (a,), backward)


def norm_last(a, keepdims=False, eps=1e-300):
    """L2 norm along the last axis; subgradient 0 at exactly zero vectors."""
    y = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=keepdims))
    out = Tensor(y)

    def backward(g):
        denom = y if keepdims else np.expand_dims(y, -1)
        gg = g if keepdims else np.expand_dims(g, -1)
        safe = np.maximum(denom, eps)
        return (gg * a.data / safe * (denom > 0.0),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f, x, step=1e-5):
    """Compare reverse-mode gradient of scalar f(x) against central differences.

    Returns the max relative error over components, with denominator
    max(|analytic|, |numeric|, 1e-12). Raises if f(x) is not finite.
    """
    x.grad = None
    with Tape() as t:
        y = f(x)
        if not np.all(np.isfinite(y.data)):
            raise FloatingPointError("grad_check: f(x) is not finite")
        t.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x).data)
        flat[i] = orig - step
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


def zero_grads(params):
    for p in params:
        p.grad = None
