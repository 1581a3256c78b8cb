"""A small reverse-mode automatic differentiation engine on numpy float64 arrays.

Only what the policy network needs is provided: elementwise arithmetic with
broadcasting, matrix products, the activations used by the heads, slicing,
concatenation and a padded/strided 3D convolution. Graph recording can be
switched off per thread with :func:`no_grad`.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self):
        return tsum(self)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    q = a.data / b.data
    return _make(q, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * q / b.data, b.data.shape)))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,))


def elu(a) -> Tensor:
    a = as_tensor(a)
    neg = np.minimum(a.data, 0.0)
    em1 = np.expm1(neg)
    out = np.where(a.data > 0, a.data, em1)
    return _make(out, (a,), lambda g: (g * np.where(a.data > 0, 1.0, em1 + 1.0),))


def softsign(a) -> Tensor:
    a = as_tensor(a)
    d = 1.0 + np.abs(a.data)
    return _make(a.data / d, (a,), lambda g: (g / (d * d),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * s,))


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    m = a.data > floor
    return _make(np.where(m, a.data, floor), (a,), lambda g: (g * m,))


# --------------------------------------------------------------------------
# reductions and shape ops


def tsum(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a) -> Tensor:
    """Reverse the axes of a 2-D tensor."""
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g) if _needs_add_at(key) else full.__setitem__(key, g)
        return (full,)

    return _make(a.data[key], (a,), bw)


def _needs_add_at(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D ``a`` and 1-D or 2-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if b.data.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


# --------------------------------------------------------------------------
# 3D convolution


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (``[C,D,H,W]`` or batched ``[N,C,D,H,W]``) with ``w [Cout,Cin,k,k,k]``.

    Implemented as im2col followed by one matrix product.
    """
    x, w = as_tensor(x), as_tensor(w)
    batched = x.data.ndim == 5
    xd = x.data if batched else x.data[None]
    n, cin, d, h, wd = xd.shape
    cout, cin_w, kd, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv3d channel mismatch: input {cin}, weight {cin_w}")
    od, oh, ow = (_out_size(d, kd, stride, padding), _out_size(h, kh, stride, padding),
                  _out_size(wd, kw, stride, padding))
    xp = np.pad(xd, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else xd
    s = stride
    cols = np.empty((cin, kd, kh, kw, n, od, oh, ow))
    for a in range(kd):
        for bb in range(kh):
            for c in range(kw):
                patch = xp[:, :, a:a + s * od:s, bb:bb + s * oh:s, c:c + s * ow:s]
                cols[:, a, bb, c] = patch.transpose(1, 0, 2, 3, 4)
    cols = cols.reshape(cin * kd * kh * kw, n * od * oh * ow)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
    out = out.reshape(cout, n, od, oh, ow).transpose(1, 0, 2, 3, 4)
    out = np.ascontiguousarray(out if batched else out[0])
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gb = g if batched else g[None]
        g2 = gb.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.data.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(cin, kd, kh, kw, n, od, oh, ow)
            gxp = np.zeros((cin, n) + xp.shape[2:])
            for a in range(kd):
                for bb in range(kh):
                    for c in range(kw):
                        gxp[:, :, a:a + s * od:s, bb:bb + s * oh:s, c:c + s * ow:s] += gcols[:, a, bb, c]
            if padding:
                gxp = gxp[:, :, padding:padding + d, padding:padding + h, padding:padding + wd]
            gx = gxp.transpose(1, 0, 2, 3, 4)
            gx = np.ascontiguousarray(gx if batched else gx[0])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _make(out, parents, bw)


# --------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data) if grad is None else np.asarray(grad, float)}
    owned = set()  # buffers created here, safe to update in place
    for node in reversed(_topo(root)):
        key = id(node)
        g = grads.pop(key, None)
        owned.discard(key)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key not in grads:
                grads[key] = pg
            elif key in owned:
                grads[key] += pg
            else:
                grads[key] = grads[key] + pg
                owned.add(key)
