"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that requires gradients records its
inputs and a backward rule. :func:`backward` collects the nodes reachable
from a scalar output into a :class:`Graph`, orders them by creation (which
is a valid topological order) and visits each once in reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NonFiniteError

_counter = itertools.count()
_state = threading.local()

TRAIN_EPS = 1e-12


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that can participate in a differentiation graph."""

    __array_priority__ = 100.0
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._id = next(_counter)
        out.op = op
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict:
        return backward(self)

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._from_op(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._from_op(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._from_op(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if np.any(b.data == 0):
            raise DegenerateInputError("division by zero")
        return Tensor._from_op(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a, p = self, float(exponent)
        return Tensor._from_op(
            a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), f"pow{p:g}"
        )

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        a = self
        if isinstance(index, Tensor):
            raise TypeError("index with integer arrays or slices, not tensors")

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(a.data[index], (a,), back, "getitem")

    # -- shape --------------------------------------------------------------------

    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor._from_op(a.data.T, (a,), lambda g: (g.T,), "transpose")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._from_op(
            a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
        )

    # -- reductions and pointwise ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")

    def exp(self) -> "Tensor":
        a = self
        with np.errstate(over="ignore"):
            out = np.exp(a.data)
        return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self
        if np.any(a.data <= 0):
            raise DegenerateInputError("log of a non-positive value")
        return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def sqrt(self) -> "Tensor":
        a = self
        if np.any(a.data < 0):
            raise DegenerateInputError("sqrt of a negative value")
        out = np.sqrt(a.data)
        if np.any(out == 0) and is_grad_enabled() and a.requires_grad:
            raise DegenerateInputError("sqrt at zero has no derivative")
        return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")

    def abs(self) -> "Tensor":
        a = self
        sign = np.sign(a.data)
        return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")

    def __abs__(self):
        return self.abs()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return Tensor._from_op(
        a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul"
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, back, "concat")


def norm(x: Tensor, axis=None, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean norm ``sqrt(sum(x**2) + eps)``.

    With ``eps == 0`` a zero vector has norm 0 and zero subgradient.
    """
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    safe = np.where(out > 0, out, 1.0)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(out > 0, g * x.data / safe, 0.0),)

    if keepdims:
        val = out
    else:
        val = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return Tensor._from_op(val, (x,), back, "norm")


def logsumexp(x: Tensor, axis=None, mask: np.ndarray | None = None) -> Tensor:
    """Stabilized ``log(sum(exp(x)))``, optionally over entries where ``mask`` is True."""
    x = as_tensor(x)
    if x.size == 0:
        raise DimensionError("logsumexp of an empty tensor")
    valid = np.ones(x.shape, dtype=bool) if mask is None else np.broadcast_to(mask, x.shape)
    if not np.all(valid.any(axis=axis)):
        raise DimensionError("logsumexp over an empty (fully masked) slice")
    masked = np.where(valid, x.data, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    w = np.where(valid, np.exp(masked - m), 0.0)
    s = w.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = w / s

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    val = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return Tensor._from_op(val, (x,), back, "logsumexp")


def amin(x: Tensor, axis: int) -> Tensor:
    """Minimum along ``axis``; the gradient goes to the first minimizer."""
    x = as_tensor(x)
    idx = np.argmin(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._from_op(np.squeeze(out, axis=axis), (x,), back, "amin")


def _check_norms(n: np.ndarray, what: str) -> None:
    if np.any(n == 0):
        raise DegenerateInputError(f"cosine similarity with a zero-norm {what}")


def cosine_sim(u: Tensor, v: Tensor, strict: bool = True) -> Tensor:
    """Cosine similarity of two 1-D tensors.

    In strict mode a zero vector raises :class:`DegenerateInputError`;
    otherwise ``TRAIN_EPS`` is added inside each norm.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine_sim expects equal 1-D shapes, got {u.shape} and {v.shape}")
    eps = 0.0 if strict else TRAIN_EPS
    if strict:
        _check_norms(np.array([np.linalg.norm(u.data), np.linalg.norm(v.data)]), "input")
    return (u * v).sum() / (norm(u, eps=eps) * norm(v, eps=eps))


def normalize_rows(a: Tensor, strict: bool = False) -> Tensor:
    a = as_tensor(a)
    if strict:
        _check_norms(np.linalg.norm(a.data, axis=1), "row")
    return a / norm(a, axis=1, keepdims=True, eps=0.0 if strict else TRAIN_EPS)


def pairwise_cosine(a: Tensor, b: Tensor, strict: bool = False) -> Tensor:
    """Matrix of cosine similarities between the rows of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_cosine shape mismatch: {a.shape} vs {b.shape}")
    return normalize_rows(a, strict) @ normalize_rows(b, strict).T


class Graph:
    """Operation records reachable from an output, in creation order."""

    def __init__(self, output: Tensor):
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        self.output = output
        self.nodes: list[Tensor] = [seen[k] for k in sorted(seen)]

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t._backward is None and t.requires_grad]

    def backward(self) -> dict:
        out = self.output
        if out.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {out._id: np.ones_like(out.data)}
        result: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    result[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
        for leaf, g in result.items():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        return result


def backward(out: Tensor) -> dict:
    """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the gradients produced by this call, keyed by leaf tensor.
    Leaves the output does not depend on keep ``grad`` unchanged; callers
    wanting explicit zeros should use :func:`grad_of`.
    """
    return Graph(out).backward()


def grad_of(out: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``out`` w.r.t. ``leaves`` (zeros for disconnected leaves)."""
    leaves = list(leaves)
    grads = Graph(out).backward() if out.requires_grad else {}
    return [grads.get(t, np.zeros_like(t.data)) for t in leaves]


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The denominator for each coordinate is ``max(|g_ad|, |g_fd|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must be in [1e-7, 1e-3], got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    (g_ad,) = grad_of(out, [xt])
    g_fd = np.zeros_like(x0)
    flat = g_fd.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += eps
            xm[i] -= eps
            fp = float(f(Tensor(xp.reshape(x0.shape))).data)
            fm = float(f(Tensor(xm.reshape(x0.shape))).data)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite function value at coordinate {i}")
            flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if x0.size else 0.0
