"""Reverse-mode automatic differentiation over numpy arrays.

Each :class:`Tensor` records its parents and a closure that pushes its
gradient to them. :meth:`Tensor.backward` orders the graph topologically and
runs each closure once, so shared subexpressions accumulate gradients from
every use.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100  # make numpy defer to our reflected operators

    def __init__(self, value, requires_grad: bool = False,
                 parents: Sequence["Tensor"] = (), backward: Optional[Callable] = None,
                 name: str = ""):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    # -- basics ---------------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Backpropagate from this tensor; ``grad`` defaults to ones."""
        order, seen = [], set()

        def visit(t):
            stack = [(t, False)]
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
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads = {id(self): np.ones_like(self.value) if grad is None
                 else np.asarray(grad, float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            if node.name:  # named intermediate: keep its gradient too
                node._accumulate(g)
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- construction helpers ---------------------------------------------
    @staticmethod
    def _wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _make(value, parents, backward) -> "Tensor":
        req = any(p.requires_grad for p in parents)
        return Tensor(value, req, parents if req else (), backward if req else None)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        o = Tensor._wrap(other)
        a, b = self.shape, o.shape
        return Tensor._make(self.value + o.value, (self, o),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __mul__(self, other):
        o = Tensor._wrap(other)
        a, b = self, o
        return Tensor._make(a.value * b.value, (a, b), lambda g: (
            _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = Tensor._wrap(other)
        a, b = self, o
        return Tensor._make(a.value / b.value, (a, b), lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / b.value ** 2, b.shape)))

    def __rtruediv__(self, other):
        return Tensor._wrap(other) / self

    def __pow__(self, k: float):
        a = self
        return Tensor._make(a.value ** k, (a,),
                            lambda g: (g * k * a.value ** (k - 1),))

    def __matmul__(self, other):
        o = Tensor._wrap(other)
        a, b = self, o

        def back(g):
            ga = g @ np.swapaxes(b.value, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.value)
            gb = (np.swapaxes(a.value, -1, -2) @ g if a.ndim > 1
                  else np.multiply.outer(a.value, g))
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(a.value @ b.value, (a, b), back)

    def __getitem__(self, idx):
        a = self

        def back(g):
            out = np.zeros_like(a.value)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(a.value[idx], (a,), back)

    # -- reductions and shape ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod(
            [self.shape[ax] for ax in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        return Tensor._make(a.value.reshape(*shape), (a,),
                            lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(a.value.transpose(axes), (a,),
                            lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    # -- elementwise nonlinearities -------------------------------------------
    def relu(self):
        a = self
        mask = a.value > 0
        return Tensor._make(a.value * mask, (a,), lambda g: (g * mask,))

    def sigmoid(self):
        a = self
        s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
        return Tensor._make(s, (a,), lambda g: (g * s * (1 - s),))

    def tanh(self):
        a = self
        th = np.tanh(a.value)
        return Tensor._make(th, (a,), lambda g: (g * (1 - th ** 2),))

    def exp(self):
        a = self
        e = np.exp(a.value)
        return Tensor._make(e, (a,), lambda g: (g * e,))

    def abs(self):
        a = self
        s = np.sign(a.value)
        return Tensor._make(np.abs(a.value), (a,), lambda g: (g * s,))


def tensor(value, requires_grad=False, name="") -> Tensor:
    return Tensor(value, requires_grad=requires_grad, name=name)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [Tensor._wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.value for t in ts], axis=axis), ts, back)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [Tensor._wrap(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(ts)))

    return Tensor._make(np.stack([t.value for t in ts], axis=axis), ts, back)


def where(cond, a, b) -> Tensor:
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    cond = np.asarray(cond, bool)
    return Tensor._make(np.where(cond, a.value, b.value), (a, b), lambda g: (
        _unbroadcast(np.where(cond, g, 0.0), a.shape),
        _unbroadcast(np.where(cond, 0.0, g), b.shape)))


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        k = it.multi_index
        old = x[k]
        x[k] = old + eps
        fp = f()
        x[k] = old - eps
        fm = f()
        x[k] = old
        g[k] = (fp - fm) / (2 * eps)
    return g


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
              eps: float = 1e-5) -> float:
    """Largest relative error between autodiff and finite differences of
    ``fn(*tensors).sum()`` over all inputs."""
    arrays = [np.array(x, dtype=float) for x in inputs]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*ts).sum().backward()
    worst = 0.0
    for t, a in zip(ts, arrays):
        num = numerical_gradient(
            lambda: float(fn(*[Tensor(b) for b in arrays]).value.sum()), a, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        denom = max(np.abs(num).max(initial=0.0), np.abs(ana).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(ana - num).max(initial=0.0) / denom))
    return worst
