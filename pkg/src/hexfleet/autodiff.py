"""Minimal reverse-mode autodiff over float64 numpy arrays.

Covers exactly the operator set the dispatch models need: matmul, broadcast
add/mul, concat, sigmoid/tanh/GeLU, row softmax, dropout, reductions, and
row indexing, plus Adam and a central finite-difference gradient checker.
Values are immutable once created; graph build and backward are single-owner.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("tensor division supported by scalar constants only")
        return mul(self, 1.0 / float(c))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- primitives -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 2:  # (m,)@(m,k) -> (k,)
            ga = bd @ g
            gb = np.outer(ad, g)
        elif ad.ndim == 2 and bd.ndim == 1:  # (n,m)@(m,) -> (n,)
            ga = np.outer(g, bd)
            gb = ad.T @ g
        elif ad.ndim == 1 and bd.ndim == 1:  # dot -> ()
            ga = g * bd
            gb = g * ad
        else:  # (n,m)@(m,k) -> (n,k)
            ga = g @ bd.T
            gb = ad.T @ g
        return ga, gb

    return _make(data, (a, b), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, ts, vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    data = a.data.T

    def vjp(g):
        return (g.T,)

    return _make(data, (a,), vjp)


def row(a, i: int) -> Tensor:
    """Select row i of a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("row", a.shape)
    data = a.data[i]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[i] = g
        return (ga,)

    return _make(data, (a,), vjp)


def element(a, i: int) -> Tensor:
    """Select element i of a 1-D tensor as a scalar."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError("element", a.shape)
    data = np.float64(a.data[i])

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[i] = g
        return (ga,)

    return _make(data, (a,), vjp)


def tsum(a) -> Tensor:
    a = as_tensor(a)
    data = np.float64(a.data.sum())

    def vjp(g):
        return (np.full(a.shape, g),)

    return _make(data, (a,), vjp)


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    data = np.float64(a.data.mean())

    def vjp(g):
        return (np.full(a.shape, g / n),)

    return _make(data, (a,), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    data = a.data * a.data

    def vjp(g):
        return (2.0 * a.data * g,)

    return _make(data, (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(data, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp binds."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _make(data, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _make(data, (a,), vjp)


def gelu(a) -> Tensor:
    """GeLU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dx,)

    return _make(data, (a,), vjp)


def softmax(a) -> Tensor:
    """Row softmax over the last axis."""
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, (a,), vjp)


def dropout(a, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Zero entries with probability `rate`, scaling survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    data = a.data * keep

    def vjp(g):
        return (g * keep,)

    return _make(data, (a,), vjp)


# -- backward -------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation into .grad of every reachable tracked tensor.

    Repeated calls without zero_grad accumulate. Iterative topo sort; episode
    graphs are far deeper than the recursion limit.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not math.isfinite(float(loss.data)):
        raise ValueError("backward on non-finite loss")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.float64(1.0)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:  # leaf (parameter or tracked input)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# -- optimizer ------------------------------------------------------------


def adam_step(param, grad, m, v, step, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction. Returns (param, m, v, step)."""
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ShapeError("adam_step", param.shape, grad.shape, m.shape, v.shape)
    step = step + 1
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v, step


class Adam:
    """Adam over a name->Tensor parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step_count = 0

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        self.step_count += 1
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**self.step_count)
            v_hat = self.v[name] / (1 - self.beta2**self.step_count)
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- gradient checking -----------------------------------------------------


def gradcheck(build_loss, params: dict[str, Tensor], h: float = 1e-5) -> float:
    """Max relative error between backward grads and central finite differences.

    `build_loss()` must rebuild the scalar loss from `params` on every call.
    """
    for t in params.values():
        t.grad = None
    loss = build_loss()
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().data)
            flat[i] = orig - h
            down = float(build_loss().data)
            flat[i] = orig
            num[i] = (up - down) / (2 * h)
        a = analytic[name].reshape(-1)
        denom = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(num).max(initial=0.0)))
        worst = max(worst, float(np.abs(a - num).max(initial=0.0)) / denom)
    return worst
