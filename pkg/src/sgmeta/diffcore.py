"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a Tensor wraps a numpy float64 array and,
when it results from an operation on tensors that require gradients, keeps
references to its parents together with a closure that propagates the
incoming cotangent. ``backward`` materializes the DAG in topological order
and visits every node exactly once, so gradient accumulation is
deterministic (bitwise-reproducible for identical graphs).

Graphs are rebuilt on every forward pass; tensors that require gradients
are never mutated in place. ``detach`` cuts a tensor out of the graph
while sharing its values.
"""

from __future__ import annotations

import numpy as np

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Enable per-op NaN/Inf assertions on forward results."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class GraphError(RuntimeError):
    """Backward was asked something the graph cannot answer."""


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 array participating in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced in forward pass")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast cotangent back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out_data = a.data / b.data

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * out_data / b.data, b.shape))

    return _make(out_data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python float (not a graph node)."""
    c = float(c)

    def back(g):
        _accum(a, c * g)

    return _make(c * a.data, (a,), back)


# -- matrix ops ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)

    def back(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeError("reshape", a.shape, shape)

    def back(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), back)


# -- nonlinearities -------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def back(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), back)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), back)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), back)


def square(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), back)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def back(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), back)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _make(out_data, (a,), back)


# -- reductions -----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError("sum", a.shape, (axis,))
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError("mean", a.shape, (axis,))
    count = a.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape) / count)

    return _make(out_data, (a,), back)


# -- structural ops ---------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError("index_select", a.shape, (axis,))

    def back(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, tuple(idx if i == axis % a.ndim else slice(None) for i in range(a.ndim)), g)
            _accum(a, acc)

    return _make(np.take(a.data, idx, axis=axis), (a,), back)


def take_per_row(a: Tensor, col_indices) -> Tensor:
    """Pick a[i, col_indices[i]] for each row i."""
    idx = np.asarray(col_indices, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("take_per_row", a.shape, idx.shape)
    rows = np.arange(a.shape[0])

    def back(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, (rows, idx), g)
            _accum(a, acc)

    return _make(a.data[rows, idx], (a,), back)


def detach(a: Tensor) -> Tensor:
    """Same values, no gradient flow through the result."""
    return Tensor(a.data, requires_grad=False)


# -- backward ------------------------------------------------------------


def _topo_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(out: Tensor) -> None:
    """Populate ``.grad`` on every reachable tensor that requires grad.

    ``out`` must be a scalar (0-dim or single-element) tensor.
    """
    if out.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {out.shape}")
    if not out.requires_grad:
        raise GraphError("output does not require grad; nothing to differentiate")
    order = _topo_order(out)
    out.grad = np.ones_like(out.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def grad(out: Tensor, wrt, allow_unused: bool = False):
    """Run backward and return gradients for ``wrt`` in order.

    Tensors unreachable from ``out`` (e.g. cut off by detach) raise unless
    ``allow_unused`` is set, in which case they yield zeros.
    """
    backward(out)
    grads = []
    for t in wrt:
        if t.grad is None:
            if not allow_unused:
                raise GraphError("tensor not part of the graph rooted at the output")
            grads.append(np.zeros_like(t.data))
        else:
            grads.append(t.grad)
    return grads


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- finite-difference checking -------------------------------------------


def _scalar_value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def fd_gradient(f, params, h: float = 1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each param tensor.

    ``f`` must rebuild its graph from the params' current ``.data`` on every
    call. Returns one array per param, matching its shape.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar_value(f())
            flat[i] = orig - h
            fm = _scalar_value(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(f, params, h: float = 1e-5, tol: float = 1e-6):
    """Compare autodiff and finite-difference gradients of scalar ``f()``.

    Relative error per parameter is ``|ad - fd| / max(|ad|, |fd|, 1e-12)``
    in the 2-norm over the flattened parameter. Returns the list of errors;
    raises AssertionError when any exceeds ``tol``.
    """
    zero_grad(params)
    out = f()
    ad = grad(out, params, allow_unused=True)
    fd = fd_gradient(f, params, h=h)
    errors = []
    for a, b in zip(ad, fd):
        denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
        errors.append(float(np.linalg.norm(a - b) / denom))
    worst = max(errors)
    if worst > tol:
        raise AssertionError(f"gradient check failed: relative error {worst:.3e} > {tol:.1e}")
    return errors
