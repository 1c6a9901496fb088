"""Minimal n-dimensional tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 by default, float64 for gradient
verification) and record a computation graph. The operator set is exactly
what the synthesis pipeline needs: convolution, PReLU, bilinear resizing,
elementwise arithmetic with limited broadcasting, reductions, padding and
concatenation. No general broadcasting semantics are promised beyond what
these ops use internally.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

DEFAULT_DTYPE = np.float32

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Shape-carrying real array participating in reverse-mode differentiation.

    Immutable after construction except for the gradient accumulator.
    Gradient accumulation is additive: running backward twice through the
    same node doubles the leaf gradients. Parents are kept as a tuple so
    graph traversal order is deterministic.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = ()):
        self.data = data
        self.requires_grad = bool(requires_grad) and _grad_enabled
        # Leaves eagerly hold a zero accumulator so unreached parameters
        # report a zero gradient after backward.
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(data) if self.requires_grad and not _parents else None
        )
        self._parents = _parents
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # Operator sugar; scalars only on the non-tensor side.
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(_coerce(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor, casting to ``dtype`` (default float32)."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Graph-node constructor used by every op (and by custom ops elsewhere)."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=parents if req else ())
    if req:
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if have != want:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss into every reachable leaf.

    Traversal is an iterative topological sort over the parent tuples, so
    gradient accumulation order is identical run to run.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[Tuple[Tensor, bool]] = [(loss, False)]
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

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
            if node._parents:
                node.grad = None  # interior grads are transient


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    data = a.data * a.data.dtype.type(s)

    def bwd(g):
        a.accumulate_grad(g * a.data.dtype.type(s))

    return _make(data, (a,), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bwd)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bwd(g):
        a.accumulate_grad(g * (0.5 / data))

    return _make(data, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    """|a|, with subgradient 0 at exact zeros."""
    data = np.abs(a.data)

    def bwd(g):
        a.accumulate_grad(g * np.sign(a.data))

    return _make(data, (a,), bwd)


def maximum(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    b = _coerce(b, a.dtype)
    data = np.maximum(a.data, b.data)

    def bwd(g):
        take_a = a.data >= b.data
        a.accumulate_grad(_unbroadcast(g * take_a, a.shape))
        b.accumulate_grad(_unbroadcast(g * ~take_a, b.shape))

    return _make(data, (a, b), bwd)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.dtype)

    def bwd(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            shape = list(a.shape)
            for ax in sorted(ax % a.ndim for ax in axes):
                shape[ax] = 1
            g = g.reshape(shape)
        a.accumulate_grad(np.broadcast_to(g, a.shape))

    return _make(data, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul_scalar(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = tuple(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def bwd(g):
        start = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            p.accumulate_grad(g[tuple(sl)])
            start += n

    return _make(data, parts, bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = a.data[sl]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        a.accumulate_grad(full)

    return _make(data, (a,), bwd)


def _fold_reflect_axis(g: np.ndarray, axis: int, pad: int, n: int) -> np.ndarray:
    """Adjoint of mirror padding along one axis: size n + 2*pad back to n."""
    gm = np.moveaxis(g, axis, 0)
    core = gm[pad:pad + n].copy()
    if pad:
        core[1:pad + 1] += np.flip(gm[:pad], axis=0)
        core[n - 1 - pad:n - 1] += np.flip(gm[pad + n:], axis=0)
    return np.moveaxis(core, 0, axis)


def reflect_pad2d(a: Tensor, pad: int) -> Tensor:
    """Mirror-pad the two trailing axes (edge sample not duplicated)."""
    h, w = a.shape[-2], a.shape[-1]
    if pad >= h or pad >= w:
        raise ShapeError(f"reflection pad {pad} too large for {h}x{w}")
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    data = np.pad(a.data, widths, mode="reflect")

    def bwd(g):
        g = _fold_reflect_axis(g, a.ndim - 1, pad, w)
        g = _fold_reflect_axis(g, a.ndim - 2, pad, h)
        a.accumulate_grad(g)

    return _make(data, (a,), bwd)


def decimate2(a: Tensor) -> Tensor:
    """Keep every second row/column (phase 0) of the two trailing axes."""
    data = a.data[..., ::2, ::2].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., ::2, ::2] = g
        a.accumulate_grad(full)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor],
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW input, OIKhKw weight, zero padding.

    float32 inputs take the im2col/GEMM fast path. float64 inputs reduce in
    exact (c, kh, kw) loop order so results are bit-identical to a direct
    quadruple-loop evaluation, which is what the verification oracles use.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D OIKhKw, got shape {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, "
                         f"weight expects {i}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input "
                         f"{h}x{w} with padding {padding}")

    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)  # (N, C*Kh*Kw, Ho*Wo)
    w2 = weight.data.reshape(o, -1)
    if x.data.dtype == np.float64:
        out3 = np.zeros((n, o, ho * wo), dtype=np.float64)
        for k in range(cols.shape[1]):  # left fold mirrors the loop oracle
            out3 += w2[:, k][np.newaxis, :, np.newaxis] * cols[:, k:k + 1, :]
    else:
        out3 = np.matmul(w2, cols)  # (N, O, Ho*Wo)
    if bias is not None:
        out3 += bias.data[:, np.newaxis]
    data = out3.reshape(n, o, ho, wo)

    # the closure keeps cols alive until backward; roughly a 9x copy of every
    # conv input, which profiling showed is cheaper than rebuilding it
    def bwd(g):
        g3 = g.reshape(n, o, ho * wo)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g3.sum(axis=(0, 2)))
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)  # (N, C*Kh*Kw, Ho*Wo)
            x.accumulate_grad(
                _col2im(gcols, x.shape, kh, kw, stride, padding, ho, wo))

    return _make(data, (x, weight) + ((bias,) if bias is not None else ()), bwd)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*Kh*Kw, Ho*Wo), K axis ordered (c, kh, kw)."""
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = x[:, :, u:u + stride * ho:stride,
                                 v:v + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(gcols: np.ndarray, x_shape, kh: int, kw: int, stride: int,
            padding: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    g6 = gcols.reshape(n, c, kh, kw, ho, wo)
    for u in range(kh):
        for v in range(kw):
            gpad[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                g6[:, :, u, v]
    if padding:
        return gpad[:, :, padding:padding + h, padding:padding + w].copy()
    return gpad


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric rectifier: x where x >= 0, else slope[c] * x (channel axis 1)."""
    c = x.shape[1]
    if slope.shape != (c,):
        raise ShapeError(f"prelu slope must have shape ({c},), got {slope.shape}")
    shape = (1, c) + (1,) * (x.ndim - 2)
    s = slope.data.reshape(shape)
    neg = x.data < 0
    data = np.where(neg, x.data * s, x.data)

    def bwd(g):
        x.accumulate_grad(np.where(neg, g * s, g))
        if slope.requires_grad:
            contrib = np.where(neg, g * x.data, 0)
            axes = (0,) + tuple(range(2, x.ndim))
            slope.accumulate_grad(contrib.sum(axis=axes))

    return _make(data, (x, slope), bwd)


# ---------------------------------------------------------------------------
# bilinear resizing (align-corners-false, factor 2 either way)

_plan_cache: dict = {}


def _resize_plan(n_in: int, scale: float):
    """Per-axis gather indices and weights for sample centers (i+0.5)/s - 0.5."""
    key = (n_in, scale)
    plan = _plan_cache.get(key)
    if plan is None:
        n_out = int(round(n_in * scale))
        src = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        i1 = np.clip(i0 + 1, 0, n_in - 1)
        i0 = np.clip(i0, 0, n_in - 1)
        plan = (i0, i1, 1.0 - frac, frac, n_out)
        _plan_cache[key] = plan
    return plan


def _resize_axis(x: np.ndarray, axis: int, plan) -> np.ndarray:
    i0, i1, w0, w1, _ = plan
    shape = [1] * x.ndim
    shape[axis] = len(w0)
    w0 = w0.reshape(shape).astype(x.dtype)
    w1 = w1.reshape(shape).astype(x.dtype)
    return np.take(x, i0, axis=axis) * w0 + np.take(x, i1, axis=axis) * w1


def _resize_axis_backward(g: np.ndarray, axis: int, n_in: int, plan) -> np.ndarray:
    i0, i1, w0, w1, _ = plan
    gm = np.moveaxis(g, axis, 0)
    lead = gm.shape[0]
    g2 = gm.reshape(lead, -1)
    out = np.zeros((n_in, g2.shape[1]), dtype=g.dtype)
    np.add.at(out, i0, g2 * w0[:, None].astype(g.dtype))
    np.add.at(out, i1, g2 * w1[:, None].astype(g.dtype))
    out = out.reshape((n_in,) + gm.shape[1:])
    return np.moveaxis(out, 0, axis)


def bilinear_resize(x: Tensor, scale: float) -> Tensor:
    """Resize the two trailing axes by exactly 2 or 1/2, align-corners false."""
    if scale not in (2, 2.0, 0.5):
        raise ShapeError(f"bilinear_resize supports scale 2 or 1/2, got {scale}")
    scale = float(scale)
    h, w = x.shape[-2], x.shape[-1]
    if scale == 0.5 and (h % 2 or w % 2):
        raise ShapeError(f"halving needs even extents, got {h}x{w}")
    plan_h = _resize_plan(h, scale)
    plan_w = _resize_plan(w, scale)
    data = _resize_axis(_resize_axis(x.data, x.ndim - 2, plan_h), x.ndim - 1, plan_w)

    def bwd(g):
        g = _resize_axis_backward(g, x.ndim - 1, w, plan_w)
        g = _resize_axis_backward(g, x.ndim - 2, h, plan_h)
        x.accumulate_grad(g)

    return _make(data, (x,), bwd)
