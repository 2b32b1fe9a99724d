"""Reverse-mode differentiation over dense numpy arrays.

Every operation on a :class:`Tensor` records its parents and a vector-Jacobian
product closure. :func:`backward` walks the recorded graph in reverse
topological order and returns fresh gradients for every leaf, so calling it
twice on the same graph gives bitwise-identical results.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np
from scipy import special

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

try:
    if os.environ.get("PHONSIGN_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from ._ops_ext import gelu_with_grad as _gelu_compiled
except ImportError:
    _gelu_compiled = None

# set by kink_monitor(); tracks the smallest |input| seen by leaky_relu
_kink_state: list[float] | None = None


class Tensor:
    __slots__ = ("data", "parents", "vjp", "requires_grad", "grad", "name")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        return backward(self)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, vjp) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, parents, vjp, requires_grad=True)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undoing numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), vjp)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting; both operands >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), vjp)


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1, ax2) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def flip(a, axis) -> Tensor:
    a = as_tensor(a)
    return _make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


# ---------------------------------------------------------------- elementwise

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def expm1(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.expm1(a.data), (a,), lambda g: (g * np.exp(a.data),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + e^x) in a form that neither overflows nor rounds to zero."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * special.expit(a.data),))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    if _gelu_compiled is not None and x.dtype == np.float64:
        y, d = _gelu_compiled(np.ascontiguousarray(x).reshape(-1))
        y, d = y.reshape(x.shape), d.reshape(x.shape)
    else:
        cdf = special.ndtr(x)
        y = x * cdf
        d = cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(y, (a,), lambda g: (g * d,))


def leaky_relu(a, slope=0.2) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if _kink_state is not None and x.size:
        _kink_state[0] = min(_kink_state[0], float(np.abs(x).min()))
    pos = x > 0
    # subgradient at exactly 0 is taken from the negative side

    def vjp(g):
        return (np.where(pos, g, slope * g),)

    return _make(np.where(pos, x, slope * x), (a,), vjp)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return as_tensor(a)
    a = as_tensor(a)
    keep = (rng.random(a.shape, dtype=np.float32) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------- softmax family

def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


def masked_softmax(a, mask: np.ndarray, axis=-1) -> Tensor:
    """Softmax restricted to entries where ``mask`` is true.

    Masked-out entries get exactly zero weight; every row must have at least
    one unmasked entry.
    """
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(np.any(np.broadcast_to(mask, np.broadcast_shapes(mask.shape, a.shape)), axis=axis)):
        raise ValueError("every softmax row needs at least one unmasked entry")
    z = a.data + np.where(mask, 0.0, -np.inf)
    z -= z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    out = z

    def vjp(g):
        go = g * out
        go -= out * go.sum(axis=axis, keepdims=True)
        return (go,)

    return _make(out, (a,), vjp)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------- composites

def l2_normalize(a, axis=-1, eps=0.0) -> Tensor:
    a = as_tensor(a)
    sq = tsum(a * a, axis=axis, keepdims=True)
    if eps:
        sq = sq + eps * eps
    return a / sqrt(sq)


def cosine_matrix(a, b, eps=0.0) -> Tensor:
    """Pairwise cosine similarity between rows: (..., n, d) x (m, d) -> (..., n, m)."""
    return matmul(l2_normalize(a, eps=eps), transpose(l2_normalize(b, eps=eps)))


def conv1d_same(x, w) -> Tensor:
    """Temporal convolution with zero 'same' padding.

    ``x``: (..., T, C_in); ``w``: (k, C_in, C_out) with odd k. Output (..., T, C_out),
    out[t] = sum_j x[t + j - k//2] @ w[j].
    """
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[0]
    if k % 2 != 1:
        raise ValueError("conv kernel size must be odd")
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"conv channel mismatch: {x.shape} vs {w.shape}")
    half = k // 2
    T = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    out = sum(xp[..., j:j + T, :] @ w.data[j] for j in range(k))

    def vjp(g):
        gw = np.stack([
            np.tensordot(xp[..., j:j + T, :], g, axes=(tuple(range(x.ndim - 1)), tuple(range(x.ndim - 1))))
            for j in range(k)
        ])
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[..., j:j + T, :] += g @ w.data[j].T
        return gxp[..., half:half + T, :], gw

    return _make(out, (x, w), vjp)


# ---------------------------------------------------------------- backward

def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Sets ``.grad`` on every leaf that requires gradients (overwriting any
    previous value) and returns a mapping ``id(leaf) -> gradient``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(topo_order(loss)):
        g = grads.pop(id(node), None)
        if node.vjp is None:
            leaves[id(node)] = (node, g if g is not None else np.zeros_like(node.data))
            continue
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    out = {}
    for key, (leaf, g) in leaves.items():
        leaf.grad = g
        out[key] = g
    return out


def grad(loss: Tensor, wrt) -> list[np.ndarray]:
    g = backward(loss)
    return [g.get(id(t), np.zeros_like(t.data)) for t in wrt]


@contextlib.contextmanager
def kink_monitor():
    """Record the smallest |x| fed to leaky_relu inside the block.

    Yields a one-element list; finite-difference checks use it to reject
    draws that land next to the kink.
    """
    global _kink_state
    prev = _kink_state
    _kink_state = [np.inf]
    try:
        yield _kink_state
    finally:
        _kink_state = prev


def finite_diff_check(f, params: dict[str, np.ndarray], step=1e-5, max_coords=None,
                      seed=0, floor=1e-6):
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` maps a dict of leaf Tensors to a scalar Tensor. Returns
    ``(max_rel_err, per_tensor)`` where ``per_tensor[name]`` is that tensor's
    max relative error ``|a - n| / max(|a|, |n|, floor)``. When ``max_coords``
    is given, at most that many coordinates per tensor are checked, drawn with
    a fixed-seed generator.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = {k: parameter(v, name=k) for k, v in params.items()}
    loss = f(leaves)
    backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    rng = np.random.Generator(np.random.Philox(seed))
    per_tensor = {}
    for name, base in params.items():
        flat = base.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in idx:
            vals = []
            for sign in (1.0, -1.0):
                pert = dict(params)
                arr = base.copy()
                arr.reshape(-1)[i] += sign * step
                pert[name] = arr
                vals.append(f({k: Tensor(v) for k, v in pert.items()}).item())
            num = (vals[0] - vals[1]) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        per_tensor[name] = worst
    return max(per_tensor.values(), default=0.0), per_tensor
