"""A small reverse-mode autodiff engine over numpy arrays.

Every operation records its parents and a closure that accumulates
gradients; :meth:`Tensor.backward` walks the graph in reverse topological
order. Only first derivatives exist. Quantities that need a derivative of
a derivative (the eikonal penalty) are built as explicit graphs of
first-order ops instead, see :meth:`nsf.autodiff.nn.Mlp.forward_with_input_grad`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: Sequence["Tensor"] = (), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = tuple(p for p in _parents if p.requires_grad)
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = op
        self.name = name

    # -- basics -----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}{', grad' if self.requires_grad else ''})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
            seed = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(seed, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- construction helper -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op):
        out = Tensor(data, _parents=parents, op=op)
        if out.requires_grad:
            out._backward = backward
        return out

    # -- arithmetic -------------------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        a, b = self, other
        return Tensor._make(a.data + b.data, (a, b),
                            lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        a, b = self, other
        return Tensor._make(a.data - b.data, (a, b),
                            lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))), "sub")

    def __rsub__(self, other):
        return _wrap(other) - self

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: ((a, -g),), "neg")

    def __mul__(self, other):
        other = _wrap(other)
        a, b = self, other
        return Tensor._make(a.data * b.data, (a, b),
                            lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                                       (b, _unbroadcast(g * a.data, b.shape))), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        a, b = self, other
        return Tensor._make(a.data / b.data, (a, b),
                            lambda g: ((a, _unbroadcast(g / b.data, a.shape)),
                                       (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))), "div")

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self
        return Tensor._make(a.data ** p, (a,), lambda g: ((a, g * p * a.data ** (p - 1)),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return ((a, full),)

        return Tensor._make(a.data[idx], (a,), bw, "getitem")

    @property
    def T(self):
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: ((a, g.T),), "transpose")

    def reshape(self, *shape):
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: ((a, g.reshape(a.shape)),), "reshape")

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, a.shape).copy()),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, name=name)


# -- linear algebra -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return Tensor._make(a.data @ b.data, (a, b),
                        lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)), "matmul")


def spmm(matrix, x: Tensor) -> Tensor:
    """Constant (sparse or dense) matrix times tensor."""
    x = _wrap(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {matrix.shape} @ {x.shape}")
    mt = matrix.T
    return Tensor._make(np.asarray(matrix @ x.data), (x,), lambda g: ((x, np.asarray(mt @ g)),), "spmm")


def rowwise_matvec(A: np.ndarray, x: Tensor) -> Tensor:
    """``out[n] = A[n] @ x[n]`` for a constant stack of matrices ``A`` (N, p, q)."""
    x = _wrap(x)
    A = np.asarray(A, dtype=DTYPE)
    if A.ndim != 3 or A.shape[0] != x.shape[0] or A.shape[2] != x.shape[1]:
        raise ShapeError(f"rowwise_matvec shape mismatch: {A.shape} x {x.shape}")
    return Tensor._make(np.einsum("npq,nq->np", A, x.data), (x,),
                        lambda g: ((x, np.einsum("npq,np->nq", A, g)),), "rowwise_matvec")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return out

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    return x[np.asarray(index, dtype=np.int64)]


# -- elementwise ------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    v = np.exp(x.data)
    return Tensor._make(v, (x,), lambda g: ((x, g * v),), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: ((x, g / x.data),), "log")


def sqrt(x: Tensor) -> Tensor:
    v = np.sqrt(x.data)
    return Tensor._make(v, (x,), lambda g: ((x, g * 0.5 / np.where(v > 0, v, np.inf)),), "sqrt")


def absolute(x: Tensor) -> Tensor:
    return Tensor._make(np.abs(x.data), (x,), lambda g: ((x, g * np.sign(x.data)),), "abs")


def square(x: Tensor) -> Tensor:
    return Tensor._make(x.data * x.data, (x,), lambda g: ((x, 2.0 * g * x.data),), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: ((x, g * mask),), "relu")


def step(x: Tensor) -> Tensor:
    """Heaviside step (derivative of relu); zero gradient almost everywhere."""
    return Tensor((x.data > 0).astype(DTYPE))


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    return expit(z)


def _softplus_parts(bz: np.ndarray):
    """``(softplus(bz), sigmoid(bz))`` sharing one exponential."""
    a = np.abs(bz)
    np.minimum(a, 40.0, out=a)  # keep exp() out of the denormal range
    e = np.exp(-a)
    sp = np.maximum(bz, 0.0)
    sp += np.log1p(e)
    s = 1.0 / (1.0 + e)
    s -= 0.5
    s = np.copysign(s, bz)
    s += 0.5
    return sp, s


def softplus_np(z: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return _softplus_parts(beta * z)[0] / beta


def sigmoid(x: Tensor, beta: float = 1.0) -> Tensor:
    """``sigmoid(beta * x)``."""
    s = sigmoid_np(beta * x.data)
    return Tensor._make(s, (x,), lambda g: ((x, g * beta * s * (1.0 - s)),), "sigmoid")


def softplus(x: Tensor, beta: float = 1.0) -> Tensor:
    """``log(1 + exp(beta x)) / beta``; derivative ``sigmoid(beta x)``."""
    return softplus_with_slope(x, beta)[0]


def softplus_with_slope(x: Tensor, beta: float = 1.0):
    """Softplus and its derivative as two graph nodes sharing one exponential."""
    sp, s = _softplus_parts(beta * x.data)
    sp /= beta
    value = Tensor._make(sp, (x,), lambda g: ((x, g * s),), "softplus")
    slope = Tensor._make(s, (x,), lambda g: ((x, g * beta * s * (1.0 - s)),), "sigmoid")
    return value, slope


def norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; gradient taken as 0 at the origin."""
    v = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(v > 0, v, 1.0)
        return ((x, np.where(v > 0, gg * x.data / safe, 0.0)),)

    out = v if keepdims else np.squeeze(v, axis=axis)
    return Tensor._make(out, (x,), bw, "norm")


def dot(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    return (a * b).sum(axis=axis)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
