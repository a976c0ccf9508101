"""Reverse-mode automatic differentiation over NumPy arrays.

A small tape engine sized for the tiny convolutional networks in this
package: float64 arithmetic, channels-last (NHWC) layout, and an explicit
operator set.  Every primitive's vector-Jacobian product is checked against
central finite differences in tests/test_autodiff.py.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "as_tensor", "add", "sub", "mul", "div", "neg", "matmul",
    "exp", "log", "absolute", "sqrt", "maximum", "hypot", "sigmoid", "silu",
    "softplus", "reshape", "concat", "getitem", "tsum", "tmean",
    "conv2d", "pad_edge", "upsample2x", "Adam",
]


class Tensor:
    """Array node in the backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of self (summed if non-scalar) into leaves."""
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp):
    out = Tensor(data)
    if any(p.requires_grad or p._vjp is not None for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# -- pointwise ----------------------------------------------------------

def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a):
    """|a| with subgradient 0 at the kink."""
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a):
    """Elementwise square root with gradient 0 at 0."""
    a = as_tensor(a)
    y = np.sqrt(a.data)
    safe = np.where(y > 0.0, y, 1.0)
    return _node(y, (a,), lambda g: (np.where(y > 0.0, g / (2.0 * safe), 0.0),))


def maximum(a, b):
    """Elementwise max; on exact ties the subgradient is routed to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return _node(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.data.shape),
                            _unbroadcast(g * ~take_a, b.data.shape)))


def hypot(a, b):
    """sqrt(a^2 + b^2) with gradient 0 at the origin."""
    a, b = as_tensor(a), as_tensor(b)
    r = np.hypot(a.data, b.data)
    safe = np.where(r > 0.0, r, 1.0)

    def vjp(g):
        scale = g / safe
        zero = r == 0.0
        ga = np.where(zero, 0.0, scale * a.data)
        gb = np.where(zero, 0.0, scale * b.data)
        return ga, gb

    return _node(r, (a, b), vjp)


def sigmoid(a):
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _node(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def softplus(a):
    a = as_tensor(a)
    return _node(np.logaddexp(0.0, a.data), (a,),
                 lambda g: (g / (1.0 + np.exp(-a.data)),))


# -- shape --------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _node(a.data[idx], (a,), vjp)


# -- reductions ---------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# -- image ops (NHWC) ---------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D correlation: x (N,H,W,Cin), w (kh,kw,Cin,Cout), zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    kh, kw, cin, cout = w.data.shape
    if x.data.ndim != 4 or x.data.shape[3] != cin:
        raise ValueError(
            f"conv2d expects NHWC input with {cin} channels, got shape {x.data.shape}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    n, hp, wp, _ = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sh, sw = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    acc = np.zeros((n * ho * wo, cout))
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i:i + sh:stride, j:j + sw:stride, :]
            acc += xs.reshape(-1, cin) @ w.data[i, j]
    y = acc.reshape(n, ho, wo, cout)
    if b is not None:
        y = y + b.data

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, i:i + sh:stride, j:j + sw:stride, :]
                gw[i, j] = xs.reshape(-1, cin).T @ g2
                gxp[:, i:i + sh:stride, j:j + sw:stride, :] += (
                    g2 @ w.data[i, j].T).reshape(n, ho, wo, cin)
        gx = gxp[:, p:hp - p, p:wp - p, :] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    return _node(y, parents, vjp)


def pad_edge(x, p):
    """Replicate-pad H and W by p pixels each side (NHWC)."""
    x = as_tensor(x)
    n, h, w, c = x.data.shape
    y = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge")

    def vjp(g):
        gh = g[:, p:p + h, :, :].copy()
        gh[:, 0, :, :] += g[:, :p, :, :].sum(axis=1)
        gh[:, -1, :, :] += g[:, p + h:, :, :].sum(axis=1)
        gx = gh[:, :, p:p + w, :].copy()
        gx[:, :, 0, :] += gh[:, :, :p, :].sum(axis=2)
        gx[:, :, -1, :] += gh[:, :, p + w:, :].sum(axis=2)
        return (gx,)

    return _node(y, (x,), vjp)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling (NHWC)."""
    x = as_tensor(x)
    n, h, w, c = x.data.shape
    y = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def vjp(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _node(y, (x,), vjp)


# -- optimizer ----------------------------------------------------------

class Adam:
    """Adaptive-moment gradient descent on a list of parameter Tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
