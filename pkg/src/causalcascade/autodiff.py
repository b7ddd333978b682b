"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar result replays the recorded graph in reverse
topological order and accumulates gradients into every tensor that requires
them.  The primitive set is deliberately small: matmul, broadcasting
elementwise arithmetic, exp/log/sqrt, relu/softplus/softmax, reductions,
slicing/stacking, and the trace of a matrix exponential.  Everything the
models in this package differentiate is composed from these.

All values are float64 unless constructed as float32 explicitly; the default
precision keeps finite-difference gradient checks meaningful.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "mul",
    "matmul",
    "concat",
    "stack",
    "relu",
    "absolute",
    "softplus",
    "softmax",
    "exp",
    "log",
    "sqrt",
    "clip_min",
    "trace_expm",
    "matrix_exp",
    "no_grad",
    "grad",
    "finite_diff_check",
    "GradCheckReport",
    "AutodiffError",
    "ShapeMismatchError",
    "NonFiniteError",
    "RepeatedBackwardError",
    "UnsupportedPrimitiveError",
]


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeMismatchError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class RepeatedBackwardError(AutodiffError):
    pass


class UnsupportedPrimitiveError(AutodiffError):
    pass


# Finiteness is validated on every op output so NaN/inf surfaces at the op
# that produced it rather than epochs later.  Cheap at the array sizes used
# here; flip off only for profiling.
CHECK_FINITE = True


def _check_finite(values: np.ndarray) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(values)):
        raise NonFiniteError("operation produced non-finite values")


class Tensor:
    """An immutable array value participating in the autodiff graph.

    ``requires_grad=True`` marks a leaf whose gradient should be accumulated
    into ``.grad`` by :meth:`backward`.  Interior nodes propagate gradients
    automatically whenever any ancestor requires them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps", "_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjps=()):
        if isinstance(data, Tensor):
            raise UnsupportedPrimitiveError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags["OWNDATA"] and not _parents:
            arr = arr.copy()
        _check_finite(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjps = _vjps
        self._done = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph plumbing ------------------------------------------------
    def _needs_tape(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``.grad``.

        ``self`` must be scalar.  A second call on the same output is an
        error: the graph is consumed, re-run the computation to re-record.
        """
        if self.data.size != 1:
            raise ShapeMismatchError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        if self._done:
            raise RepeatedBackwardError(
                "backward() already ran for this output; rebuild the graph first"
            )
        self._done = True

        order = _topo_order(self)
        adjoint: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.data)
        }
        for node in order:
            out_grad = adjoint.pop(id(node), None)
            if out_grad is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = out_grad.copy()
                else:
                    node.grad = node.grad + out_grad
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent._needs_tape():
                    continue
                contrib = vjp(out_grad)
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = contrib if prev is None else prev + contrib

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Nodes of the graph rooted at ``root``, outputs before inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    # Iterative DFS: the SSM recurrence builds graphs deeper than the
    # default Python recursion limit.
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent._needs_tape():
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float, np.ndarray, np.floating, np.integer, list, tuple)):
        return Tensor(value)
    raise UnsupportedPrimitiveError(f"cannot interpret {type(value).__name__} as Tensor")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Skip graph recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjps: tuple) -> Tensor:
    if _GRAD_ENABLED and any(p._needs_tape() for p in parents):
        return Tensor(data, _parents=parents, _vjps=vjps)
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise UnsupportedPrimitiveError("tensor exponents are not supported")
    p = float(exponent)
    out = a.data**p
    return _make(out, (a,), (lambda g: g * p * a.data ** (p - 1.0),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeMismatchError("matmul requires at least 1-d operands")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from None
    if a.ndim == 1 or b.ndim == 1:
        # Vector operands drop a dimension, which makes the generic vjp below
        # wrong; keep the engine honest and make callers reshape instead.
        raise UnsupportedPrimitiveError("reshape vectors to matrices before matmul")

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)

    return _make(out, (a, b), (vjp_a, vjp_b))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out)
    return _make(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out = np.log(a.data)
        except FloatingPointError:
            raise NonFiniteError("log of non-positive value") from None
    return _make(out, (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    _check_finite(out)
    return _make(out, (a,), (lambda g: g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    # Subgradient at exactly 0 is taken to be 0.
    mask = (a.data > 0.0).astype(a.data.dtype)
    return _make(out, (a,), (lambda g: g * mask,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)
    sign = np.sign(a.data)  # subgradient 0 at the kink
    return _make(out, (a,), (lambda g: g * sign,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), (lambda g: g * sig,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return _make(out, (a,), (vjp,))


def clip_min(a, lo: float) -> Tensor:
    """Elementwise max(a, lo); gradient passes only where unclipped."""
    a = as_tensor(a)
    out = np.maximum(a.data, lo)
    mask = (a.data > lo).astype(a.data.dtype)
    return _make(out, (a,), (lambda g: g * mask,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make(np.asarray(out), (a,), (vjp,))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return _make(out, (a,), (lambda g: g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (a,), (lambda g: np.transpose(g, inverse),))


def take(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return full

    return _make(np.asarray(out), (a,), (vjp,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(index)]

        return vjp

    return _make(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


# ---------------------------------------------------------------------------
# matrix exponential
# ---------------------------------------------------------------------------

_TAYLOR_ORDER = 18
_SCALE_TARGET = 0.5


def matrix_exp(m: np.ndarray) -> np.ndarray:
    """e^M by scaling-and-squaring with an order-18 Taylor kernel.

    The argument is scaled so its induced 1-norm is at most 0.5 before the
    series is evaluated, then squared back up.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatchError(f"matrix_exp needs a square matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix_exp of non-finite matrix")
    n = m.shape[0]
    norm = float(np.abs(m).sum(axis=0).max()) if n else 0.0
    squarings = max(0, math.ceil(math.log2(norm / _SCALE_TARGET))) if norm > _SCALE_TARGET else 0
    a = m / (2.0**squarings)
    eye = np.eye(n)
    # Horner evaluation of sum_{k<=18} a^k / k!
    result = eye.copy()
    for k in range(_TAYLOR_ORDER, 0, -1):
        result = eye + (a @ result) / k
    for _ in range(squarings):
        result = result @ result
    _check_finite(result)
    return result


def trace_expm(m) -> Tensor:
    """tr(e^M) as a differentiable scalar; d tr(e^M)/dM = (e^M)^T."""
    m = as_tensor(m)
    e = matrix_exp(m.data)
    out = np.asarray(np.trace(e))
    return _make(out, (m,), (lambda g: g * e.T,))


# ---------------------------------------------------------------------------
# gradient utilities
# ---------------------------------------------------------------------------

def grad(f, leaves) -> list[np.ndarray]:
    """Gradients of the scalar ``f(*leaves)`` with respect to each leaf."""
    leaves = list(leaves)
    for leaf in leaves:
        if not leaf.requires_grad:
            raise UnsupportedPrimitiveError("grad leaves must have requires_grad=True")
        leaf.zero_grad()
    out = f(*leaves)
    if not isinstance(out, Tensor):
        raise UnsupportedPrimitiveError("grad target must return a Tensor")
    out.backward()
    return [
        leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    excluded: list[tuple[int, int]] = field(default_factory=list)


def finite_diff_check(f, leaves, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    Coordinates where the one-sided difference quotients disagree (kinks,
    e.g. relu at 0) are excluded from the comparison and reported.  Relative
    error uses max(|analytic|, |numeric|, 1e-8) as the denominator.

    A central difference quotient carries cancellation noise of order
    eps * |f| / step, so discrepancies below that resolution (with a safety
    factor of 100) count as agreement: no step size could tell such a
    gradient apart from the analytic one.
    """
    analytic = grad(f, leaves)

    def evaluate(values: list[np.ndarray]) -> float:
        probes = [Tensor(v) for v in values]
        result = float(f(*probes).data)
        if not math.isfinite(result):
            raise NonFiniteError("objective evaluated to a non-finite value")
        return result

    base = [leaf.data.copy() for leaf in leaves]
    f0 = evaluate(base)
    eps = float(np.finfo(np.float64).eps)
    max_rel = 0.0
    excluded: list[tuple[int, int]] = []
    checked = 0
    for li, leaf in enumerate(leaves):
        flat = base[li].reshape(-1)
        for ci in range(flat.size):
            original = flat[ci]
            flat[ci] = original + step
            fp = evaluate(base)
            flat[ci] = original - step
            fm = evaluate(base)
            flat[ci] = original

            forward = (fp - f0) / step
            backward = (f0 - fm) / step
            slope_scale = max(abs(forward), abs(backward), 1.0)
            if abs(forward - backward) > 0.1 * slope_scale:
                excluded.append((li, ci))
                continue
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[li].reshape(-1)[ci]
            checked += 1
            noise_floor = 100.0 * eps * max(abs(f0), abs(fp), abs(fm)) / (2.0 * step)
            if abs(numeric - a) <= noise_floor:
                continue
            rel = abs(numeric - a) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return GradCheckReport(
        max_rel_err=max_rel, passed=max_rel <= tol, n_checked=checked, excluded=excluded
    )
