"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tensor wraps an ndarray plus the tape links (op kind, inputs, vjp
closure) recorded while building a forward computation.  `trace` returns
the recorded graph in topological order and `backward` walks it in
reverse, accumulating gradients into the `.grad` buffers of every tensor
that requires them.  `finite_difference_grad` is the independent
central-difference oracle used to cross-check the analytic gradients.

The op set is deliberately small: matrix products (dense and
constant-sparse), elementwise arithmetic with scalar broadcast, data
movement (take/concat/stack/transpose/reshape), relu/sigmoid/logsigmoid/
softmax and sum/mean reductions.  That closure is sufficient for every
computation in this package; there are no general broadcasting rules.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the links recorded for reverse-mode autodiff.

    `data` is always a contiguous float64 ndarray.  Leaves created with
    requires_grad=True are trainable parameters; tensors produced by ops
    inherit requires_grad from their inputs and carry a vjp closure that
    routes the output gradient back to them.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "_vjp")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 inputs: tuple = (), vjp: Callable | None = None):
        # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray would
        # promote them to shape (1,))
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self.inputs = inputs
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data, op: str, inputs: Sequence[Tensor], vjp: Callable | None) -> Tensor:
    """Build an op result, recording tape links only when gradients are on."""
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, op=op, inputs=tuple(inputs), vjp=vjp)
    return Tensor(data, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# graph walking

def trace(output: Tensor) -> list[Tensor]:
    """Recorded computation reachable from `output`, in topological order.

    Every tensor's inputs appear before it; the list is the explicit form
    of the (acyclic by construction) computation record.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if id(t) not in seen:
                stack.append((t, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(t) into t.grad for every tensor in the graph.

    `output` must be scalar.  Leaf gradients are accumulated, so callers
    reusing parameter tensors across steps must reset `.grad` first.
    """
    if output.data.shape != ():
        raise UsageError(f"backward target must be a scalar, got shape {output.data.shape}")
    order = trace(output)
    output.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


def grad_map(output: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward and return {name: gradient} for the given parameters.

    Parameters the graph never touched get explicit zero gradients.
    """
    backward(output)
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


# ---------------------------------------------------------------------------
# primitives

def _is_scalar(t: Tensor) -> bool:
    return t.data.shape == ()


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; one side may be a scalar."""
    if a.data.shape != b.data.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise UsageError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def vjp(g):
        _accum(a, g.sum() if _is_scalar(a) and g.shape != () else g)
        _accum(b, g.sum() if _is_scalar(b) and g.shape != () else g)

    return _result(out_data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product; one side may be a scalar."""
    if a.data.shape != b.data.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise UsageError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def vjp(g):
        ga = g * b.data
        gb = g * a.data
        _accum(a, ga.sum() if _is_scalar(a) and ga.shape != () else ga)
        _accum(b, gb.sum() if _is_scalar(b) and gb.shape != () else gb)

    return _result(out_data, "mul", (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python-float constant."""
    c = float(c)

    def vjp(g):
        _accum(x, g * c)

    return _result(x.data * c, "scale", (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for the 1-D/2-D combinations the model needs."""
    an, bn = a.data.ndim, b.data.ndim
    if an not in (1, 2) or bn not in (1, 2):
        raise UsageError(f"matmul supports 1-D/2-D operands, got {an}-D @ {bn}-D")
    if a.data.shape[-1] != b.data.shape[0]:
        raise UsageError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def vjp(g):
        if an == 2 and bn == 2:
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        elif an == 2 and bn == 1:
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)
        elif an == 1 and bn == 2:
            _accum(a, b.data @ g)
            _accum(b, np.outer(a.data, g))
        else:  # 1-D @ 1-D -> scalar
            _accum(a, g * b.data)
            _accum(b, g * a.data)

    return _result(out_data, "matmul", (a, b), vjp)


def spmm(m, x: Tensor) -> Tensor:
    """Left-multiply by a constant matrix (scipy sparse or ndarray).

    Only `x` receives gradients; `m` is graph structure, not a parameter.
    """
    if x.data.ndim != 2:
        raise UsageError(f"spmm expects a 2-D right operand, got {x.data.shape}")
    if m.shape[1] != x.data.shape[0]:
        raise UsageError(f"spmm shape mismatch: {m.shape} @ {x.data.shape}")
    out_data = np.asarray(m @ x.data)

    def vjp(g):
        _accum(x, np.asarray(m.T @ g))

    return _result(out_data, "spmm", (x,), vjp)


def take(x: Tensor, idx) -> Tensor:
    """Select rows (2-D) or elements (1-D) by an integer index array.

    Duplicate indices are allowed; their gradients accumulate.
    """
    idx = np.asarray(idx, dtype=np.intp)
    out_data = x.data[idx]

    def vjp(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx, g)

    return _result(out_data, "take", (x,), vjp)


def row(x: Tensor, i: int) -> Tensor:
    """Single row of a 2-D tensor as a 1-D tensor."""
    i = int(i)
    out_data = x.data[i]

    def vjp(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[i] += g

    return _result(out_data, "row", (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    parts = list(parts)
    if not parts:
        raise UsageError("concat of zero tensors")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _result(out_data, "concat", tuple(parts), vjp)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis (scalars -> vector)."""
    parts = list(parts)
    if not parts:
        raise UsageError("stack of zero tensors")
    out_data = np.stack([p.data for p in parts], axis=0)

    def vjp(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return _result(out_data, "stack", tuple(parts), vjp)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise UsageError(f"transpose expects a 2-D tensor, got {x.data.shape}")

    def vjp(g):
        _accum(x, g.T)

    return _result(x.data.T, "transpose", (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape

    def vjp(g):
        _accum(x, g.reshape(orig))

    return _result(x.data.reshape(shape), "reshape", (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def vjp(g):
        _accum(x, g * mask)

    return _result(np.where(mask, x.data, 0.0), "relu", (x,), vjp)


def _sigmoid_nd(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; both branches are exact.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out_data = _sigmoid_nd(x.data)

    def vjp(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _result(out_data, "sigmoid", (x,), vjp)


def log(x: Tensor) -> Tensor:
    """Natural logarithm (positive inputs)."""
    out_data = np.log(x.data)

    def vjp(g):
        _accum(x, g / x.data)

    return _result(out_data, "log", (x,), vjp)


def logsigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)), stable for large |x|."""
    out_data = np.minimum(x.data, 0.0) - np.log1p(np.exp(-np.abs(x.data)))

    def vjp(g):
        _accum(x, g * _sigmoid_nd(-x.data))

    return _result(out_data, "logsigmoid", (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Probability-normalized exponentials along `axis` (max-shifted)."""
    if x.data.size == 0:
        raise UsageError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (g - inner))

    return _result(out_data, "softmax", (x,), vjp)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    out_data = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _result(out_data, "sum", (x,), vjp)


def tensor_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    if n == 0:
        raise UsageError("mean of an empty tensor")
    out_data = x.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / n, x.data.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape).copy())

    return _result(out_data, "mean", (x,), vjp)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D tensors (scalar result)."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise UsageError("dot expects 1-D tensors")
    return matmul(a, b)


# ---------------------------------------------------------------------------
# verification oracle

def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient (f(x+he_i) - f(x-he_i)) / 2h per coordinate.

    `f` must recompute from the array it is handed on every call; the
    array is perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise UsageError("finite difference step h must be positive")
    x = np.asarray(x, dtype=np.float64, order="C")
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = float(f(x))
        flat_x[i] = orig - h
        fm = float(f(x))
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad
