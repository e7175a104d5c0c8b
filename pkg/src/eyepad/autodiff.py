"""Reverse-mode automatic differentiation over dense float64 tensors.

A forward op links its output tensor to an ``Op`` node holding the input
tensors and one local-gradient closure per input. ``backward`` linearizes
the op graph reachable from a scalar root into a ``Tape`` (execution-
compatible topological order) and walks it once in reverse, accumulating
gradients into ``Tensor.grad``.

Everything is float64: desk-scale models make speed irrelevant and exact
dtypes keep the finite-difference checks unambiguous.
"""

from __future__ import annotations

import numpy as np

from . import _kernels


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError):
    """Incompatible input shapes for an op; records the op kind and shapes."""

    def __init__(self, kind, *shapes):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"op '{kind}': incompatible shapes {self.shapes}")


_grad_enabled = True


class no_grad:
    """Context manager that disables op recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Op:
    """One executed differentiable op: inputs, output and local gradients.

    ``grad_fns[i]`` maps the output gradient to input i's gradient
    contribution, or is None for non-differentiable inputs.
    """

    __slots__ = ("kind", "inputs", "output", "grad_fns")

    def __init__(self, kind, inputs, output, grad_fns):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.grad_fns = grad_fns


class Tape:
    """Ordered record of the ops reachable from a backward root.

    The order is topological: every op's inputs are produced by earlier
    entries (or are leaves). A backward pass visits each op exactly once.
    """

    __slots__ = ("ops",)

    def __init__(self, ops):
        self.ops = ops

    def __len__(self):
        return len(self.ops)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "op")

    def __init__(self, values, requires_grad=False):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        return float(self.values)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values):
    """A tensor that never requires gradients (labels, fixed weights)."""
    return Tensor(values, requires_grad=False)


def _make(kind, out_values, inputs, grad_fns):
    out = Tensor(out_values)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = Op(kind, tuple(inputs), out, tuple(grad_fns))
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original input shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.values.shape, b.values.shape)
    except ValueError:
        raise ShapeError(kind, a.values.shape, b.values.shape) from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _check_broadcast("add", a, b)
    return _make(
        "add",
        a.values + b.values,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.values.shape),
            lambda g: _unbroadcast(g, b.values.shape),
        ),
    )


def sub(a, b):
    _check_broadcast("sub", a, b)
    return _make(
        "sub",
        a.values - b.values,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.values.shape),
            lambda g: _unbroadcast(-g, b.values.shape),
        ),
    )


def mul(a, b):
    _check_broadcast("multiply", a, b)
    return _make(
        "multiply",
        a.values * b.values,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.values, a.values.shape),
            lambda g: _unbroadcast(g * a.values, b.values.shape),
        ),
    )


def div(a, b):
    _check_broadcast("divide", a, b)
    return _make(
        "divide",
        a.values / b.values,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.values, a.values.shape),
            lambda g: _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape),
        ),
    )


def scale(a, c):
    """Multiply by a python scalar (not itself differentiated)."""
    c = float(c)
    return _make("scale", a.values * c, (a,), (lambda g: g * c,))


def relu(a):
    mask = a.values > 0.0
    return _make("relu", np.where(mask, a.values, 0.0), (a,), (lambda g: g * mask,))


# The hinge max(x, 0) of the margin losses is the same primitive as relu.
hinge = relu


def logistic(values):
    """Overflow-safe logistic map on a plain ndarray (or scalar)."""
    v = np.asarray(values, dtype=np.float64)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    out = logistic(a.values)
    return _make("sigmoid", out, (a,), (lambda g: g * out * (1.0 - out),))


def log(a):
    return _make("log", np.log(a.values), (a,), (lambda g: g / a.values,))


def softplus(a):
    """log(1 + exp(x)) in overflow-safe form; gradient is the logistic map."""
    v = a.values
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    sig = logistic(v)
    return _make("softplus", out, (a,), (lambda g: g * sig,))


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.values.size:
        raise ShapeError("reshape", a.values.shape, shape)
    return _make(
        "reshape",
        a.values.reshape(shape),
        (a,),
        (lambda g: g.reshape(a.values.shape),),
    )


# ---------------------------------------------------------------------------
# reductions


def mean(a):
    n = a.values.size
    return _make(
        "mean",
        np.asarray(a.values.mean()),
        (a,),
        (lambda g: np.full_like(a.values, float(g) / n),),
    )


def sum_(a):
    return _make(
        "sum",
        np.asarray(a.values.sum()),
        (a,),
        (lambda g: np.full_like(a.values, float(g)),),
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    av, bv = a.values, b.values
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError("matmul", av.shape, bv.shape)
        return _make(
            "matmul",
            av @ bv,
            (a, b),
            (lambda g: g @ bv.T, lambda g: av.T @ g),
        )
    if av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError("matmul", av.shape, bv.shape)
        return _make(
            "matmul",
            av @ bv,
            (a, b),
            (lambda g: np.outer(g, bv), lambda g: av.T @ g),
        )
    if av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ShapeError("matmul", av.shape, bv.shape)
        return _make(
            "matmul",
            av @ bv,
            (a, b),
            (lambda g: bv @ g, lambda g: np.outer(av, g)),
        )
    raise ShapeError("matmul", av.shape, bv.shape)


def gather_rows(a, indices):
    """Select rows of a 2-D tensor; repeated indices accumulate gradients."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.values.ndim != 2:
        raise ShapeError("gather_rows", a.values.shape, (len(idx),))

    def grad_a(g):
        out = np.zeros_like(a.values)
        np.add.at(out, idx, g)
        return out

    return _make("gather_rows", a.values[idx], (a,), (grad_a,))


# ---------------------------------------------------------------------------
# row-wise geometry (reduce over the last axis; vectors give 0-d scalars)


def _row_expand(values, g):
    return g if values.ndim == 1 else np.asarray(g)[:, None]


def sqdist(a, b):
    """Squared L2 distance along the last axis."""
    if a.values.shape != b.values.shape:
        raise ShapeError("sqdist", a.values.shape, b.values.shape)
    diff = a.values - b.values
    out = np.einsum("...d,...d->...", diff, diff)
    return _make(
        "sqdist",
        np.asarray(out),
        (a, b),
        (
            lambda g: 2.0 * diff * _row_expand(a.values, g),
            lambda g: -2.0 * diff * _row_expand(a.values, g),
        ),
    )


def l2norm(a):
    """L2 norm along the last axis; subgradient 0 at the origin."""
    out = np.sqrt(np.einsum("...d,...d->...", a.values, a.values))
    denom = np.where(out == 0.0, 1.0, out)
    return _make(
        "l2norm",
        np.asarray(out),
        (a,),
        (lambda g: a.values / denom[..., None] * _row_expand(a.values, g)
         if a.values.ndim > 1 else a.values / denom * g,),
    )


def dot(a, b):
    """Inner product along the last axis."""
    if a.values.shape != b.values.shape:
        raise ShapeError("dot", a.values.shape, b.values.shape)
    out = np.einsum("...d,...d->...", a.values, b.values)
    return _make(
        "dot",
        np.asarray(out),
        (a, b),
        (
            lambda g: b.values * _row_expand(a.values, g),
            lambda g: a.values * _row_expand(a.values, g),
        ),
    )


# ---------------------------------------------------------------------------
# convolution (kernels backend)


def conv2d(x, w, b):
    """Valid 2-D cross-correlation of (N,C,H,W) with (O,C,kh,kw) + bias (O,)."""
    xv, wv, bv = x.values, w.values, b.values
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeError("conv2d", xv.shape, wv.shape)
    if xv.shape[2] < wv.shape[2] or xv.shape[3] < wv.shape[3]:
        raise ShapeError("conv2d", xv.shape, wv.shape)
    xc = np.ascontiguousarray(xv)
    wc = np.ascontiguousarray(wv)
    out = _kernels.conv2d_forward(xc, wc, np.ascontiguousarray(bv))

    cache = []

    def _grads(g):
        # One backward visit calls all three grad_fns with the same array;
        # compute the triple once per visit. Identity is checked with `is`
        # (the cached reference keeps the array alive, so no id reuse).
        if not cache or cache[0] is not g:
            cache[:] = [g, _kernels.conv2d_backward(xc, wc, np.ascontiguousarray(g))]
        return cache[1]

    return _make(
        "conv2d",
        out,
        (x, w, b),
        (
            lambda g: _grads(g)[0],
            lambda g: _grads(g)[1],
            lambda g: _grads(g)[2],
        ),
    )


# ---------------------------------------------------------------------------
# generic dispatcher

_KINDS = {
    "matmul": matmul,
    "add": add,
    "multiply": mul,
    "relu": relu,
    "hinge": relu,
    "mean": mean,
    "sum": sum_,
    "sqdist": sqdist,
    "l2norm": l2norm,
    "dot": dot,
    "sigmoid": sigmoid,
    "log": log,
    "scale": scale,
}


def forward_op(kind, *inputs):
    """Apply an op by kind name; records it on the graph when grads flow."""
    if kind not in _KINDS:
        raise AutodiffError(f"unknown op kind '{kind}'")
    return _KINDS[kind](*inputs)


# ---------------------------------------------------------------------------
# backward


def trace(root):
    """Linearize the op graph reachable from ``root`` into a Tape."""
    if root.op is None:
        return Tape([])
    order = []
    seen = set()
    work = [(root.op, False)]
    while work:
        op, expanded = work.pop()
        if expanded:
            order.append(op)
            continue
        if id(op) in seen:
            continue
        seen.add(id(op))
        work.append((op, True))
        for t in op.inputs:
            if t.op is not None and id(t.op) not in seen:
                work.append((t.op, False))
    return Tape(order)


def backward(root):
    """Populate ``grad`` on every requires_grad tensor reachable from root.

    Gradients accumulate: across multiple uses of a tensor within the graph
    and across repeated backward calls (clearing is the optimizer's job).
    """
    if root.values.size != 1:
        raise AutodiffError(
            f"backward root must be scalar, got shape {root.values.shape}"
        )
    if root.op is None:
        raise AutodiffError("backward on a tensor with an empty tape")
    tape = trace(root)
    flows = {id(root): np.ones_like(root.values)}
    holders = {id(root): root}
    for op in reversed(tape.ops):
        g = flows.get(id(op.output))
        if g is None:
            continue
        for t, gfn in zip(op.inputs, op.grad_fns):
            if gfn is None or not t.requires_grad:
                continue
            contrib = gfn(g)
            key = id(t)
            if key in flows:
                flows[key] = flows[key] + contrib
            else:
                flows[key] = contrib
                holders[key] = t
    for key, t in holders.items():
        if t.requires_grad:
            t.grad = flows[key] if t.grad is None else t.grad + flows[key]
