"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors are built eagerly (define-by-run). Every op records its parents and a
vector-Jacobian product closure; :func:`backward` walks the recorded graph in
reverse topological order. Gradients are returned rather than stored on the
tensors, so calling :func:`backward` twice on the same graph gives identical
results.

Conventions:
    * ``relu``/``hinge`` and ``abs`` use subgradient 0 at exactly 0.
    * ``pdist`` clamps distances below at ``PDIST_EPS`` before they are used
      as divisors; the clamped entries get zero gradient.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import linalg as sla

PDIST_EPS = 1e-8

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "vjp", "op", "id", "requires_grad")
    __array_ufunc__ = None  # numpy defers to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, *, parents=(), vjp=None, op="input"):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.id = next(_ids)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, id={self.id}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp, op) -> Tensor:
    out = Tensor(data, parents=parents, vjp=vjp, op=op)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite value produced at node {out.id} ({op})")
    return out


def _broadcast(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                         f"(operands are nodes {a.id} and {b.id})") from None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), vjp, "div")


# --- elementwise unary --------------------------------------------------------

def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out ** 2),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    """max(0, a); the gradient at exactly 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "max")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# --- shape and reductions -----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape} "
                         f"(operands are nodes {a.id} and {b.id})")

    def vjp(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: node {a.id} of shape {a.shape} cannot become {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, idx) -> Tensor:
    """Indexing, slicing and integer-array gather."""
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, (a,), vjp, "gather")


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "reduce_sum")


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp, "log_softmax")


# --- geometry and linear algebra ----------------------------------------------

def pdist(z) -> Tensor:
    """Pairwise Euclidean distance matrix of the rows of ``z`` (N x n).

    Entries below ``PDIST_EPS`` (including the diagonal) are clamped to it.
    """
    z = as_tensor(z)
    if z.ndim != 2:
        raise ShapeError(f"pdist: expected a 2-D tensor, node {z.id} has shape {z.shape}")
    diff = z.data[:, None, :] - z.data[None, :, :]
    raw = np.sqrt((diff ** 2).sum(-1))
    active = raw > PDIST_EPS
    out = np.where(active, raw, PDIST_EPS)

    def vjp(g):
        w = np.where(active, g / out, 0.0)
        w = w + w.T
        return ((w.sum(1)[:, None] * z.data) - w @ z.data,)

    return _node(out, (z,), vjp, "pdist")


def sqdist(a, b) -> Tensor:
    """Squared Euclidean distances between rows of ``a`` (N x d) and ``b`` (M x d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sqdist: incompatible shapes {a.shape} and {b.shape} "
                         f"(operands are nodes {a.id} and {b.id})")
    out = np.maximum((a.data ** 2).sum(1)[:, None] + (b.data ** 2).sum(1)[None, :] - 2.0 * a.data @ b.data.T, 0.0)

    def vjp(g):
        ga = 2.0 * (g.sum(1)[:, None] * a.data - g @ b.data)
        gb = 2.0 * (g.sum(0)[:, None] * b.data - g.T @ a.data)
        return ga, gb

    return _node(out, (a, b), vjp, "sqdist")


_last_factor: tuple[int, tuple] | None = None  # (node id, cho_factor); solve and logdet of one matrix share it


def _cho(A: Tensor, op: str):
    global _last_factor
    if _last_factor is not None and _last_factor[0] == A.id:
        return _last_factor[1]
    try:
        cf = sla.cho_factor(A.data, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"{op}: matrix at node {A.id} is not positive definite") from exc
    _last_factor = (A.id, cf)
    return cf


def remember_factor(A: Tensor, lower) -> None:
    """Register a known lower Cholesky factor of ``A`` so the next solve/logdet reuses it."""
    global _last_factor
    _last_factor = (A.id, (lower, True))


def solve_spd(A, B) -> Tensor:
    """A^{-1} B for symmetric positive definite ``A`` (Cholesky based)."""
    A, B = as_tensor(A), as_tensor(B)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != B.shape[0]:
        raise ShapeError(f"solve: cannot solve {A.shape} against {B.shape} "
                         f"(operands are nodes {A.id} and {B.id})")
    cf = _cho(A, "solve")
    X = sla.cho_solve(cf, B.data)

    def vjp(g):
        gB = sla.cho_solve(cf, g)
        gA = -np.outer(gB, X) if X.ndim == 1 else -gB @ X.T
        return gA, gB

    return _node(X, (A, B), vjp, "solve")


def logdet_spd(A) -> Tensor:
    A = as_tensor(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"logdet: node {A.id} of shape {A.shape} is not square")
    cf = _cho(A, "logdet")
    out = 2.0 * np.log(np.diag(cf[0])).sum()

    def vjp(g):
        return (g * sla.cho_solve(cf, np.eye(A.shape[0])),)

    return _node(out, (A,), vjp, "logdet")


# --- graph traversal ----------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor, wrt: Sequence[Tensor], seed: float | np.ndarray = 1.0) -> list[np.ndarray]:
    """Gradients of scalar ``out`` with respect to each tensor in ``wrt``.

    Tensors in ``wrt`` that ``out`` does not depend on get zero gradients.
    """
    if out.data.size != 1:
        raise ShapeError(f"backward: seed output node {out.id} has shape {out.shape}, expected a scalar")
    grads: dict[int, np.ndarray] = {out.id: np.broadcast_to(np.asarray(seed, float), out.shape).copy()}
    if out.requires_grad:
        for node in reversed(_toposort(out)):
            g = grads.get(node.id)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = np.array(pg, dtype=np.float64)
    return [grads.get(w.id, np.zeros_like(w.data)).reshape(w.shape) for w in wrt]


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor],
                   params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``fn`` on fresh leaf tensors built from ``params`` and differentiate it."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = fn(leaves)
    names = list(leaves)
    grads = backward(out, [leaves[k] for k in names])
    return out.item(), dict(zip(names, grads))


# --- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float]  # per parameter block
    tol: float
    vector_error: float = 0.0  # over the concatenated gradient
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e <= self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def vector_passed(self) -> bool:
        return self.vector_error <= self.tol


def grad_check(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               tol: float = 1e-4, h: float = 1e-5, atol: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central finite differences.

    The error for each parameter is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max-norms, floored at ``atol`` so that an
    identically zero gradient is judged against finite-difference round-off
    rather than against itself. ``vector_error`` applies the same measure to
    the whole gradient, which stays meaningful when some block is exactly zero.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = value_and_grad(fn, params)

    def f(p):
        return fn({k: Tensor(v) for k, v in p.items()}).item()

    errors = {}
    worst_diff = worst_norm = 0.0
    for name, value in params.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(params)
            flat[i] = orig - h
            down = f(params)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        a = analytic[name]
        norm = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(a - numeric).max(initial=0.0)
        errors[name] = float(diff / max(norm, atol))
        worst_diff, worst_norm = max(worst_diff, diff), max(worst_norm, norm)
    return GradCheckReport(errors, tol, float(worst_diff / max(worst_norm, atol)))


class Adam:
    """Adam over a dict of numpy arrays."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out
