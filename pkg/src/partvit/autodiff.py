"""Minimal reverse-mode automatic differentiation engine on numpy.

Tensors hold a flat row-major numpy buffer in float32 or float64.  Ops build
an acyclic graph of closures; ``backward`` walks it once in reverse
topological order and *accumulates* into ``.grad`` (call ``zero_grads``
between steps).  There is no implicit broadcasting: elementwise ops require
identical shapes (use ``broadcast_to`` explicitly); matmul/conv2d broadcast
leading batch dims only.

float64 is supported by every op so the finite-difference harness
(``gradient_check``) can run whole models at high precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DeterminismError, NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-d array participating in the differentiation graph.

    Immutable after construction except for the ``grad`` buffer.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar (Tensor op Tensor needs exact shapes; scalars allowed)
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _result(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    """Wrap an op result, wiring graph edges iff a parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g).reshape(t.data.shape)
    else:
        t.grad += g.reshape(t.data.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of leading-dim broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            _accum(a, g)
            _accum(b, g)
        out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = _result(a.data - b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            _accum(a, g)
            _accum(b, -g)
        out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        out._backward = bwd
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _result(a.data * s, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * s)
    return out


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = _result(a.data + float(s), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g)
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0), (a,))
    if out.requires_grad:
        mask = a.data > 0
        out._backward = lambda g: _accum(a, g * mask)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = _result(y, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * y * (1.0 - y))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _result(y, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * (1.0 - y * y))
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = _result(x * cdf, (a,))
    if out.requires_grad:
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        out._backward = lambda g: _accum(a, g * (cdf + x * pdf))
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _result(y, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * y)
    return out


def log(a: Tensor) -> Tensor:
    out = _result(np.log(a.data), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g / a.data)
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    out = _result(np.transpose(a.data, axes), (a,))
    if out.requires_grad:
        inv = None if axes is None else np.argsort(axes)
        out._backward = lambda g: _accum(a, np.transpose(g, inv))
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.data.shape} to {shape}") from e
    out = _result(np.ascontiguousarray(data), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, _unbroadcast(g, a.data.shape))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                _accum(t, piece)
        out._backward = bwd
    return out


def slice_(a: Tensor, key) -> Tensor:
    out = _result(a.data[key], (a,))
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(a.data)
            full[key] += g
            _accum(a, full)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def bwd(g):
            gg = g
            if not keepdims and axis is not None:
                axes = (axis,) if np.isscalar(axis) else tuple(axis)
                axes = tuple(ax % a.data.ndim for ax in axes)
                gg = np.expand_dims(gg, tuple(sorted(axes)))
            _accum(a, np.broadcast_to(gg, a.data.shape))
        out._backward = bwd
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax % a.data.ndim] for ax in ((axis,) if np.isscalar(axis) else axis)]
    )
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.data.shape} and {b.data.shape} do not match")
    out = _result(np.matmul(a.data, b.data), (a, b))
    if out.requires_grad:
        def bwd(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(a, _unbroadcast(ga, a.data.shape))
            _accum(b, _unbroadcast(gb, b.data.shape))
        out._backward = bwd
    return out


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = _result(table.data[idx], (table,))
    if out.requires_grad:
        def bwd(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# normalizations and softmax
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, debug: bool = False) -> Tensor:
    if debug and not np.isfinite(x.data).all():
        raise NumericError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _result(s, (x,))
    if out.requires_grad:
        def bwd(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(x, s * (g - dot))
        out._backward = bwd
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse
    out = _result(ls, (x,))
    if out.requires_grad:
        def bwd(g):
            _accum(x, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))
        out._backward = bwd
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.data.shape} and {beta.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _result(xhat * gamma.data + beta.data, (x, gamma, beta))
    if out.requires_grad:
        def bwd(g):
            sum_axes = tuple(range(g.ndim - 1))
            _accum(gamma, (g * xhat).sum(axis=sum_axes))
            _accum(beta, g.sum(axis=sum_axes))
            dxhat = g * gamma.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)
        out._backward = bwd
    return out


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Divide by the L2 norm along ``axis``; zero slices are a numeric error."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if eps == 0.0 and (norm == 0.0).any():
        raise NumericError("l2_normalize: zero-norm slice")
    inv = 1.0 / (norm + eps)
    y = x.data * inv
    out = _result(y, (x,))
    if out.requires_grad:
        def bwd(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, (g - y * dot) * inv)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_geometry(H, W, kh, kw, stride, padding):
    OH = (H + 2 * padding - kh) // stride + 1
    OW = (W + 2 * padding - kw) // stride + 1
    if OH <= 0 or OW <= 0 or H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel ({kh}x{kw}) with stride {stride}, padding {padding} "
            f"does not fit input ({H}x{W})")
    return OH, OW


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, OH: int, OW: int) -> np.ndarray:
    N, C, _, _ = xp.shape
    cols = np.empty((N, C, kh, kw, OH, OW), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride]
    return cols.reshape(N, C * kh * kw, OH * OW)


def _col2im(cols: np.ndarray, xp_shape, kh, kw, stride, OH, OW) -> np.ndarray:
    N, C, Hp, Wp = xp_shape
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    cols6 = cols.reshape(N, C, kh, kw, OH, OW)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += cols6[:, :, i, j]
    return xp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] with filters [F,C,kh,kw]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/filters, got {x.data.shape} and {w.data.shape}")
    N, C, H, W = x.data.shape
    F, Cw, kh, kw = w.data.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input channels {C} != filter channels {Cw}")
    OH, OW = _conv_geometry(H, W, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, OH, OW)          # [N, C*kh*kw, OH*OW]
    wmat = w.data.reshape(F, -1)                        # [F, C*kh*kw]
    y = np.matmul(wmat, cols).reshape(N, F, OH, OW)
    out = _result(y, (x, w))
    if out.requires_grad:
        def bwd(g):
            gmat = g.reshape(N, F, OH * OW)
            _accum(w, np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape))
            gcols = np.matmul(wmat.T[None], gmat)       # [N, C*kh*kw, OH*OW]
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, OH, OW)
            _accum(x, gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: Optional[np.ndarray] = None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable requires_grad tensor.

    ``root`` must be scalar unless ``seed`` supplies the output gradient.
    """
    if seed is None:
        if root.data.size != 1:
            raise ContractError(f"backward: root has shape {root.data.shape}; pass a seed gradient")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=root.data.dtype).reshape(root.data.shape)
    if not root.requires_grad:
        return
    order = _toposort(root)
    _accum(root, seed)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_input: list = field(default_factory=list)   # (index, analytic, numeric, rel_error)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor,
                   eps: float = 1e-5, tol: float = 1e-5,
                   sample: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` against central
    finite differences, elementwise (or over ``sample`` random elements).

    ``f`` must be deterministic; two forward passes are compared bit-exactly.
    Run in float64 for meaningful tolerances.
    """
    y1 = f(x)
    y2 = f(x)
    if not np.array_equal(y1.data, y2.data):
        raise DeterminismError("gradient_check: two forward passes differ")
    if y1.data.size != 1:
        raise ContractError("gradient_check: f must be scalar-valued")

    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    out = f(probe)
    backward(out)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad

    flat = x.data.reshape(-1).copy()
    n = flat.size
    if sample is not None and sample < n:
        if rng is None:
            rng = np.random.default_rng(0)
        idxs = rng.choice(n, size=sample, replace=False)
    else:
        idxs = np.arange(n)

    report = GradCheckReport(0.0, True, tol)
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(flat.reshape(x.data.shape), dtype=x.data.dtype)).item()
        flat[i] = orig - eps
        fm = f(Tensor(flat.reshape(x.data.shape), dtype=x.data.dtype)).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = float(analytic.reshape(-1)[i])
        err = _rel_err(a, numeric)
        report.per_input.append((int(i), a, numeric, err))
        report.max_rel_error = max(report.max_rel_error, err)
    report.passed = report.max_rel_error < tol
    return report
