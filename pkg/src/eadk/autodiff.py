"""Small reverse-mode automatic differentiation engine over numpy arrays.

Graphs are taped dynamically: every operation whose inputs participate in
differentiation records its parents and a local backward rule on the output
tensor.  ``backward`` walks that tape once in reverse topological order.
Everything is float64.
"""
from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "activation",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softplus",
    "softmax",
    "layer_norm",
    "reduce",
    "maximum",
    "minimum",
    "concat",
    "take_along",
    "backward",
    "grad_check",
]

_state = threading.local()


def is_grad_enabled():
    return not getattr(_state, "no_grad", False)


class no_grad:
    """Context manager that suspends graph recording on the current thread."""

    def __enter__(self):
        self._prev = getattr(_state, "no_grad", False)
        _state.no_grad = True
        return self

    def __exit__(self, *exc):
        _state.no_grad = self._prev
        return False


class Tensor:
    """Dense float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = ""

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        if self.ndim < 2:
            return self
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def backward(self):
        return backward(self)


def tensor(data, requires_grad=False, name=""):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, rule, op):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- linear algebra ----------------------------------------------------
def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(data, (a, b), rule, "matmul")


# -- elementwise -------------------------------------------------------
def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def rule(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record(out, (a, b), rule, "div")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(a, b, op):
    """Dispatch ``op`` in {add, sub, mul, div} with broadcasting."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def power(x, exponent):
    x = _as_tensor(x)
    p = float(exponent)
    return _record(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1),), "pow")


def absolute(x):
    x = _as_tensor(x)
    return _record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    pick_a = a.data >= b.data
    return _record(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "maximum",
    )


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    pick_a = a.data <= b.data
    return _record(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "minimum",
    )


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# -- activations -------------------------------------------------------
def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    y = _stable_sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x):
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,), "exp")


def softplus(x):
    """log(1 + exp(x)), evaluated without overflow."""
    x = _as_tensor(x)
    y = np.logaddexp(0.0, x.data)
    return _record(y, (x,), lambda g: (g * _stable_sigmoid(x.data),), "softplus")


def log(x):
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


_ACTIVATIONS = {"sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log, "softplus": softplus}


def activation(x, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(x)


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis=-1):
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), rule, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm feature size {d} does not match gain {gain.shape} / bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), rule, "layer_norm")


# -- reductions --------------------------------------------------------
def reduce(x, axis=None, kind="sum", keepdims=False):
    """Reduce over ``axis`` (None means all) with ``kind`` in {sum, mean, max}.

    The max subgradient goes to the first maximal index along the axis.
    """
    x = _as_tensor(x)
    if axis is not None:
        axis = _check_axis(x, axis)
    if kind == "sum":
        data = x.data.sum(axis=axis, keepdims=keepdims)

        def rule(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

    elif kind == "mean":
        n = x.size if axis is None else x.shape[axis]
        data = x.data.mean(axis=axis, keepdims=keepdims)

        def rule(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, x.shape).copy(),)

    elif kind == "max":
        if axis is None:
            flat = int(np.argmax(x.data))
            data = x.data.reshape(-1)[flat]
            if keepdims:
                data = np.reshape(data, (1,) * x.ndim)

            def rule(g):
                out = np.zeros(x.size)
                out[flat] = np.asarray(g).reshape(-1)[0]
                return (out.reshape(x.shape),)

        else:
            idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
            data = np.take_along_axis(x.data, idx, axis=axis)
            if not keepdims:
                data = np.squeeze(data, axis)

            def rule(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                out = np.zeros(x.shape)
                np.put_along_axis(out, idx, g, axis=axis)
                return (out,)

    else:
        raise ContractError(f"unknown reduction {kind!r}")
    return _record(np.asarray(data, dtype=np.float64), (x,), rule, kind)


# -- shape manipulation ------------------------------------------------
def reshape(x, shape):
    x = _as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _record(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x, index):
    x = _as_tensor(x)
    data = x.data[index]

    def rule(g):
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(np.array(data, dtype=np.float64), (x,), rule, "getitem")


def take_along(x, indices, axis):
    """``np.take_along_axis`` with scatter-add backward."""
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    indices = np.asarray(indices, dtype=np.intp)
    data = np.take_along_axis(x.data, indices, axis=axis)

    def rule(g):
        full = np.broadcast_to(indices, g.shape)
        grids = list(np.indices(g.shape, sparse=True))
        grids[axis] = full
        out = np.zeros(x.shape)
        np.add.at(out, tuple(grids), g)
        return (out,)

    return _record(data, (x,), rule, "take_along")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(data, tuple(tensors), rule, "concat")


# -- differentiation ---------------------------------------------------
def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Backpropagate from a scalar ``loss``.

    Returns a dict mapping each participating leaf tensor to its gradient;
    the same arrays are also stored on ``Tensor.grad`` (overwriting, not
    accumulating, so repeated calls give identical results).
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    grads = {id(loss): np.ones(loss.shape)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    for leaf, g in leaves.items():
        leaf.grad = g
    return leaves


def grad_check(f, x, eps=1e-5):
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a Tensor to a scalar Tensor.  ``x`` is not modified.
    """
    base = np.array(_as_tensor(x).data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    grads = backward(f(probe))
    analytic = grads.get(probe, np.zeros_like(base))
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            hi, lo = flat.copy(), flat.copy()
            hi[i] += eps
            lo[i] -= eps
            fp = f(Tensor(hi.reshape(base.shape))).item()
            fm = f(Tensor(lo.reshape(base.shape))).item()
            # divide by the step actually taken after rounding x +- eps
            numeric.reshape(-1)[i] = (fp - fm) / (hi[i] - lo[i])
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
