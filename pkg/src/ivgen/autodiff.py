"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward()
walks the tape in reverse topological order. Only the operations the
training losses need are implemented. Two fused ops carry hand-derived
adjoints: the multivariate-normal negative log-likelihood and the
boundary-reflected Gaussian kernel density on a grid (both are verified
against finite differences in the test suite).

Gradient buffers may alias a consumed child's buffer after pass-through
ops; in-place accumulation is only ever applied after every consumer of
the aliased node has run, so leaf gradients are unaffected.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf
from scipy.special import expit as _expit

_SQRT2PI = np.sqrt(2.0 * np.pi)
_TWO_OVER_SQRTPI = 2.0 / np.sqrt(np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # force numpy to defer mixed ndarray-Tensor arithmetic to our reflected ops
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar -------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    """Interior tape node; collapses to a constant when no parent needs grads."""
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tuple(parents)
    out._backward = backward
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _accum_at(t: Tensor, idx, g):
    """In-place scatter-add into a (possibly aliased) gradient buffer."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    elif not t.grad.flags.writeable or t.grad.base is not None:
        t.grad = t.grad.copy()
    t.grad[idx] += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            # never hand the same buffer object to two different parents
            if a.requires_grad and gb is g and a.grad is g:
                gb = g.copy()
            _accum(b, gb)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward)


def pow_const(a, p: float):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _node(a.data**p, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return _node(out_data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out_data = _expit(a.data)

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def erf(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * _TWO_OVER_SQRTPI * np.exp(-a.data * a.data))

    return _node(_erf(a.data), (a,), backward)


def clip(a, lo: float, hi: float):
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accum(a, g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), backward)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def backward(g):
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _node(np.minimum(a.data, b.data), (a, b), backward)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data

    def backward(g):
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _node(np.maximum(a.data, b.data), (a, b), backward)


# shape and linear algebra ---------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(a.data @ b.data, (a, b), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            _accum(a, np.full_like(a.data, g))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.data.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def backward(g):
        _accum(a, g.reshape(old))

    return _node(a.data.reshape(shape), (a,), backward)


def swap_last2(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(a.data, -1, -2), (a,), backward)


def stack0(tensors):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, g[i])

    return _node(np.stack([t.data for t in tensors], axis=0), tuple(tensors), backward)


def index0(a, idx):
    """Select a[idx] along axis 0; idx is an int or a slice."""
    a = as_tensor(a)

    def backward(g):
        _accum_at(a, idx, g)

    return _node(a.data[idx], (a,), backward)


def fill_lower_triangular(a, dim: int):
    """Scatter (N, dim*(dim+1)/2) rows into lower-triangular (N, dim, dim)."""
    a = as_tensor(a)
    n = a.data.shape[0]
    rows, cols = np.tril_indices(dim)
    if a.data.shape[1] != rows.size:
        raise ValueError(f"expected {rows.size} columns for dim={dim}, got {a.data.shape[1]}")
    out_data = np.zeros((n, dim, dim))
    out_data[:, rows, cols] = a.data

    def backward(g):
        _accum(a, g[:, rows, cols])

    return _node(out_data, (a,), backward)


def quantile_linear(a, q: float):
    """Type-7 quantile of a 1-D tensor; gradient flows to the two order stats."""
    a = as_tensor(a)
    x = a.data
    n = x.size
    order = np.argsort(x, kind="stable")
    pos = (n - 1) * q
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    frac = pos - lo
    value = (1.0 - frac) * x[order[lo]] + frac * x[order[hi]]

    def backward(g):
        buf = np.zeros_like(x)
        buf[order[lo]] += (1.0 - frac) * g
        buf[order[hi]] += frac * g
        _accum(a, buf)

    return _node(np.asarray(value), (a,), backward)


# fused ops ------------------------------------------------------------------


def gate_pre(proj, h, u_mat, b):
    """proj + h @ u_mat + b, fused for the recurrent gate pre-activations."""
    proj, h, u_mat, b = as_tensor(proj), as_tensor(h), as_tensor(u_mat), as_tensor(b)

    def backward(g):
        if proj.requires_grad:
            _accum(proj, g)
        if h.requires_grad:
            _accum(h, g @ u_mat.data.T)
        if u_mat.requires_grad:
            _accum(u_mat, h.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _node(proj.data + h.data @ u_mat.data + b.data, (proj, h, u_mat, b), backward)


def gru_mix(z, h, cand):
    """Gated state update z * h + (1 - z) * cand, fused."""
    z, h, cand = as_tensor(z), as_tensor(h), as_tensor(cand)

    def backward(g):
        if z.requires_grad:
            _accum(z, g * (h.data - cand.data))
        if h.requires_grad:
            _accum(h, g * z.data)
        if cand.requires_grad:
            _accum(cand, g * (1.0 - z.data))

    return _node(z.data * h.data + (1.0 - z.data) * cand.data, (z, h, cand), backward)


def mvn_nll(sigma, resid):
    """0.5 * sum_n [D log 2pi + log det Sigma_n + r_n' Sigma_n^{-1} r_n].

    sigma: (N, D, D) symmetric positive definite, resid: (N, D). The
    adjoints are dSigma = 0.5 (P - P r r' P) and dresid = P r with
    P = Sigma^{-1}.
    """
    sigma, resid = as_tensor(sigma), as_tensor(resid)
    s = sigma.data
    r = resid.data
    n, d = r.shape
    prec = np.linalg.inv(s)
    sign, logdet = np.linalg.slogdet(s)
    if np.any(sign <= 0):
        raise np.linalg.LinAlgError("covariance matrix is not positive definite")
    pr = np.einsum("nij,nj->ni", prec, r)
    quad = np.einsum("ni,ni->n", r, pr)
    total = 0.5 * (n * d * np.log(2.0 * np.pi) + logdet.sum() + quad.sum())

    def backward(g):
        _accum(resid, g * pr)
        outer = np.einsum("ni,nj->nij", pr, pr)
        _accum(sigma, g * 0.5 * (prec - outer))

    return _node(np.asarray(total), (sigma, resid), backward)


_KDE_CACHE_LIMIT = 600_000  # kernel-matrix entries worth keeping for backward


def kde_reflected_density(u, h, grid: np.ndarray):
    """Gaussian KDE of samples u on a fixed grid, reflected about 0 and 1.

    u: (n,) samples in [0, 1]; h: scalar bandwidth tensor; grid: constant
    (G,) evaluation points. Returns the (G,) density. Kernel matrices are
    kept for the backward pass when small, recomputed otherwise.
    """
    u, h = as_tensor(u), as_tensor(h)
    grid = np.asarray(grid, dtype=np.float64)
    n = u.data.size

    def kernels(udata, hval):
        ys = []
        ks = []
        for s in (udata, -udata, 2.0 - udata):
            y = grid[:, None] - s[None, :]
            y /= hval
            k = y * y
            k *= -0.5
            np.exp(k, out=k)
            k /= _SQRT2PI
            ys.append(y)
            ks.append(k)
        return ys, ks

    ys, ks = kernels(u.data, float(h.data))
    dens = (ks[0] + ks[1] + ks[2]).sum(axis=1) / (n * float(h.data))
    cache = (ys, ks) if 3 * grid.size * n <= _KDE_CACHE_LIMIT else None

    def backward(g):
        hval = float(h.data)
        ys, ks = cache if cache is not None else kernels(u.data, hval)
        scale = 1.0 / (n * hval * hval)
        if u.requires_grad:
            du = scale * (
                g @ (ys[0] * ks[0]) - g @ (ys[1] * ks[1]) - g @ (ys[2] * ks[2])
            )
            _accum(u, du)
        if h.requires_grad:
            dh = -scale * sum(
                float(g @ (k * (1.0 - y * y)).sum(axis=1)) for y, k in zip(ys, ks)
            )
            _accum(h, np.asarray(dh))

    return _node(dens, (u, h), backward)


# driver ----------------------------------------------------------------------


def backward(root: Tensor):
    """Accumulate gradients of a scalar root into every reachable leaf."""
    if root.data.ndim != 0:
        raise ValueError("backward expects a scalar root")
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def numerical_gradient(f, x: np.ndarray, indices, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f at selected flat indices of x."""
    flat = x.ravel()
    grads = np.empty(len(indices))
    for k, i in enumerate(indices):
        keep = flat[i]
        flat[i] = keep + eps
        up = f()
        flat[i] = keep - eps
        down = f()
        flat[i] = keep
        grads[k] = (up - down) / (2.0 * eps)
    return grads
