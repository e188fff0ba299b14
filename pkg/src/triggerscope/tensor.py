"""Dense-tensor engine with reverse-mode automatic differentiation.

Implements exactly the operator set the rest of the toolkit needs:
convolution, ReLU, max/average pooling, linear maps, bilinear resampling,
concatenation, cross-entropy, elementwise arithmetic, plus the
non-differentiable helpers ``sign_of`` and ``project_linf``.

Conventions
-----------
* Values are numpy arrays, float64 by default; float32 is supported for
  training speed and flows through every op unchanged.
* A ``Tensor`` produced by an op keeps references to its parents and a
  backward rule; ``Graph.trace`` linearizes that record and
  ``forward_backward`` walks it once in reverse.
* Gradients are per-call: ``forward_backward`` resets the ``grad`` slot of
  every node in the graph before accumulating.
* Bilinear resampling uses half-pixel-center (align-corners=false)
  weights; see ``_interp_matrix`` for the exact formula.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, InputError, NumericError

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional value with an optional gradient slot.

    ``requires_grad`` marks leaves whose gradient the caller wants; tensors
    produced by ops inherit it from their parents when grad recording is
    enabled.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "tid", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, *, _parents=(), _backward=None, _op="leaf"):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = _op
        self.tid = next(_ids)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        """Run reverse-mode AD from this (scalar) tensor; returns the gradient map."""
        return forward_backward(Graph.trace(self), self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are valid right/left operands.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op) -> Tensor:
    """Create an op result; records the backward rule only when needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(data, _op=op)


class Graph:
    """Topologically ordered record of the ops behind one output tensor."""

    def __init__(self, nodes):
        self.nodes = nodes  # inputs precede the ops that consume them

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        nodes, seen, stack = [], set(), [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(nodes)


def _check_finite(arr, op):
    # A finite sum implies every element is finite (NaN/Inf propagate).
    if not np.isfinite(arr.sum()):
        raise NumericError(f"non-finite values produced while differentiating op {op!r}")


def forward_backward(graph: Graph, loss: Tensor) -> dict:
    """Reverse-mode sweep: returns {tensor id -> gradient Tensor} for every
    requires_grad tensor in the graph, and stores the raw gradient array on
    each node's ``grad`` slot."""
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise NumericError(f"loss is non-finite (op {loss.op!r})")
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            _check_finite(g, node.op)
            parent.grad = g if parent.grad is None else parent.grad + g
    return {n.tid: Tensor(n.grad) for n in graph.nodes if n.requires_grad and n.grad is not None}


def _unbroadcast(g, shape):
    """Sum ``g`` back down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    needs = (a.requires_grad, b.requires_grad)

    def back(g):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(g, b.data.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    needs = (a.requires_grad, b.requires_grad)

    def back(g):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(-g, b.data.shape) if needs[1] else None,
        )

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    needs = (a.requires_grad, b.requires_grad)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if needs[0] else None,
            _unbroadcast(g * ad, bd.shape) if needs[1] else None,
        )

    return _make(ad * bd, (a, b), back, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    needs = (a.requires_grad, b.requires_grad)
    ad, bd = a.data, b.data

    def back(g):
        return (
            g @ bd.T if needs[0] else None,
            ad.T @ g if needs[1] else None,
        )

    return _make(ad @ bd, (a, b), back, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _make(np.maximum(x.data, 0), (x,), back, "relu")


def sum_(x: Tensor) -> Tensor:
    shape, dtype = x.data.shape, x.data.dtype

    def back(g):
        return (np.broadcast_to(g, shape).astype(dtype, copy=False) * np.ones(shape, dtype),)

    return _make(x.data.sum(), (x,), back, "sum")


def mean_(x: Tensor) -> Tensor:
    n = x.data.size
    shape, dtype = x.data.shape, x.data.dtype

    def back(g):
        return (np.full(shape, float(g) / n, dtype),)

    return _make(x.data.mean(), (x,), back, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape

    def back(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), back, "reshape")


def concat(tensors, axis=1) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[N,F] @ w[F,K] + b[K]."""
    needs = (x.requires_grad, w.requires_grad, b.requires_grad)
    xd, wd = x.data, w.data

    def back(g):
        return (
            g @ wd.T if needs[0] else None,
            xd.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _make(xd @ wd + b.data, (x, w, b), back, "linear")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: x[N,Cin,H,W], w[Cout,Cin,kh,kw], optional b[Cout]."""
    n, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise InputError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w.data, axes=((1, 4, 5), (1, 2, 3)))  # N,Ho,Wo,Cout
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    needs = tuple(p.requires_grad for p in parents)
    wd = w.data

    def back(g):
        gx = gw = gb = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    # scatter the contribution of kernel tap (i, j)
                    contrib = np.tensordot(g, wd[:, :, i, j], axes=(1, 0))  # N,Ho,Wo,Cin
                    gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wdt] if padding else gxp
        if needs[1]:
            gw = np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3)))  # Cout,Cin,kh,kw
        if b is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, back, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling. The common kernel==stride, padding=0 case uses a fast
    non-overlapping path; odd trailing rows/cols are dropped (floor)."""
    stride = kernel if stride is None else stride
    if stride == kernel and padding == 0:
        return _maxpool_nonoverlap(x, kernel)
    return _maxpool_general(x, kernel, stride, padding)


def _maxpool_nonoverlap(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.data.shape
    ho, wo = h // k, w // k
    if not _grad_enabled:
        # inference-only path: elementwise maximum passes beat per-window
        # reductions because the window axes are tiny. float max is exact,
        # so the result is bitwise identical to the argmax path.
        y = x.data[:, :, :ho * k, :wo * k]
        if k & (k - 1) == 0:  # power of two: halve columns, then rows
            kk = k
            while kk > 1:
                y = np.maximum(y[..., 0::2], y[..., 1::2])
                kk //= 2
            kk = k
            while kk > 1:
                y = np.maximum(y[:, :, 0::2, :], y[:, :, 1::2, :])
                kk //= 2
        else:
            out = y[:, :, 0::k, 0::k].copy()
            for di in range(k):
                for dj in range(k):
                    if di or dj:
                        np.maximum(out, y[:, :, di::k, dj::k], out=out)
            y = out
        return _make(y, (x,), None, "maxpool2d")
    win = x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)  # first max wins: deterministic tie-break
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gwin = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, :ho * k, :wo * k] = (
            gwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        )
        return (gx,)

    return _make(out, (x,), back, "maxpool2d")


def _maxpool_general(x: Tensor, k: int, s: int, p: int) -> Tensor:
    n, c, h, w = x.data.shape
    neg = np.finfo(x.data.dtype).min
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=neg) if p else x.data
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s].reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        oh, ow = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = oh[None, None] * s + idx // k
        cols = ow[None, None] * s + idx % k
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (np.broadcast_to(ni, idx.shape), np.broadcast_to(ci, idx.shape), rows, cols), g)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return (gx,)

    return _make(out, (x,), back, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Adaptive average pooling to 1x1, returned as [N, C]."""
    n, c, h, w = x.data.shape

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).astype(g.dtype, copy=False).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), back, "global_avg_pool")


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int):
    """Row-stochastic bilinear weights, half-pixel-center convention.

    Output sample j reads source coordinate src = (j + 0.5) * n_in/n_out - 0.5
    clamped to [0, n_in - 1], then blends floor/ceil neighbours linearly.
    """
    a = np.zeros((n_out, n_in))
    for j in range(n_out):
        src = (j + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        a[j, i0] += 1.0 - f
        a[j, i1] += f
    return a


def resample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of the trailing two axes."""
    if out_h < 1 or out_w < 1:
        raise InputError(f"target size must be >= 1, got ({out_h}, {out_w})")
    h, w = x.data.shape[-2:]
    if (h, w) == (out_h, out_w):
        def back_id(g):
            return (g,)
        return _make(x.data.copy(), (x,), back_id, "resample")
    ah = _interp_matrix(h, out_h).astype(x.data.dtype)
    aw = _interp_matrix(w, out_w).astype(x.data.dtype)
    out = np.einsum("oh,...hw,pw->...op", ah, x.data, aw, optimize=True)

    def back(g):
        return (np.einsum("oh,...op,pw->...hw", ah, g, aw, optimize=True),)

    return _make(out, (x,), back, "resample")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under the logits.

    Accepts a single [C] row with a scalar label or an [N, C] batch with a
    length-N label vector.
    """
    ld = logits.data
    single = ld.ndim == 1
    rows = ld[None, :] if single else ld
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = rows.shape
    if c < 2:
        raise InputError(f"need at least 2 classes, got {c}")
    if y.shape != (n,):
        raise InputError(f"labels shape {y.shape} does not match batch {n}")
    if y.min() < 0 or y.max() >= c:
        raise InputError(f"label out of range [0, {c})")
    logp = log_softmax(rows)
    loss = -logp[np.arange(n), y].mean()
    if not np.isfinite(loss):
        raise NumericError("cross_entropy produced a non-finite loss")

    def back(g):
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1.0
        grad *= float(g) / n
        return (grad[0] if single else grad,)

    return _make(loss, (logits,), back, "cross_entropy")


def cast(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if x.data.dtype == dtype:
        return x
    old = x.data.dtype

    def back(g):
        return (g.astype(old),)

    return _make(x.data.astype(dtype), (x,), back, "cast")


def sign_of(t: Tensor) -> Tensor:
    """Elementwise signum in {-1, 0, +1}; not part of any gradient graph."""
    return Tensor(np.sign(t.data))


def project_linf(x: Tensor, center: Tensor, epsilon: float) -> Tensor:
    """Clamp x into the L-inf ball of the given radius around center, then
    into the valid pixel range [0, 1]. Detached from any graph."""
    if epsilon < 0:
        raise InputError(f"epsilon must be >= 0, got {epsilon}")
    if x.data.shape != center.data.shape:
        raise InputError(f"shape mismatch: {x.data.shape} vs {center.data.shape}")
    delta = np.clip(x.data - center.data, -epsilon, epsilon)
    return Tensor(np.clip(center.data + delta, 0.0, 1.0))


def clip01(arr: np.ndarray) -> np.ndarray:
    return np.clip(arr, 0.0, 1.0)
