"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an n-dimensional float array together with an
optional gradient buffer.  Every operation records a backward closure on
its output, so calling :meth:`Tensor.backward` on a scalar loss fills the
``grad`` field of every reachable tensor that has ``requires_grad`` set.
Gradient accumulation across fan-out is summation.

Conventions:
  * training runs in float32; gradient checking runs the same graph in
    float64 ("check mode") because float32 central differences are too noisy
  * relu / abs / sqrt use subgradient 0 at their kinks
  * image tensors are laid out NCHW (or CHW for single samples), row-major

The operation set is intentionally exactly what the anticipating networks
and their losses need; there is no broadcasting cleverness beyond what
those call sites use.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """Array with optional gradient tracking.

    ``data`` is float32 or float64, row-major. ``grad`` is lazily allocated
    with the same shape and dtype the first time a gradient reaches the
    tensor during backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same data, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar; fills ``grad`` of tracked tensors."""
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise UsageError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(scalar))

    def relu(self):
        return relu(self)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order; iterative so BPTT-depth graphs are safe."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def _tracking(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; attaches the closure only when gradients are live."""
    out = Tensor(data)
    if _tracking(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        # subgradient at exactly 0 is 0
        a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))  # sign(0) == 0: subgradient 0 at the kink

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root with subgradient 0 at 0 (used by the flow norm)."""
    data = np.sqrt(a.data)

    def backward(g):
        safe = np.where(data > 0, data, 1.0)
        a._accumulate(np.where(data > 0, g * 0.5 / safe, 0.0))

    return _make(data, (a,), backward)


# -- reductions and shape ops --------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.data.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        elif axis is None and not keepdims:
            gg = np.asarray(gg).reshape((1,) * a.data.ndim)
        a._accumulate(np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.data.ndim)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[i] for i in axis]))
    out = sum_(a, axis=axis, keepdims=keepdims)
    return mul(out, 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat of an empty sequence")
    axis = axis % tensors[0].data.ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW (axis 1) or CHW (axis 0) tensors along channels."""
    axis = 1 if tensors[0].data.ndim == 4 else 0
    return concat(tensors, axis=axis)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.data.ndim
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a._accumulate(buf)

    return _make(data, (a,), backward)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    axis = 1 if a.data.ndim == 4 else 0
    return slice_axis(a, axis, start, stop)


# -- dense / convolutional ops -------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ w + b`` with x:[N,D], w:[D,M], b:[M]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"linear: incompatible shapes {x.data.shape} x {w.data.shape}"
        )
    data = x.data @ w.data
    if b is not None:
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(data, parents, backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[N,C,Hp,Wp] (already padded) -> [N, C*kh*kw, Ho*Wo] patch matrix."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, ho * wo)


def _gemm_conv(col: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """col:[N,K,L] x w2:[Cout,K] -> [N,Cout,L], one GEMM per sample.

    Per-sample GEMMs keep every operand contiguous (no transpose copies),
    which is markedly faster than a single batched GEMM here.
    """
    n, k, l = col.shape
    out = np.empty((n, w2.shape[0], l), dtype=np.result_type(col, w2))
    for i in range(n):
        np.matmul(w2, col[i], out=out[i])
    return out


def conv2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """2-D cross-correlation, NCHW, zero padding.

    Output size must divide exactly: H' = (H + 2*pad - kh)/stride + 1.
    """
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: stride={stride}, pad={pad}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects NCHW input and OIHW weight, got {x.data.shape} / {w.data.shape}"
        )
    n, cin, h, wd = x.data.shape
    cout, cin2, kh, kw = w.data.shape
    if cin != cin2:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {cin2}")
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ConfigError(
            f"conv2d: non-integral output size for input {h}x{wd}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    col = _im2col(xp, kh, kw, stride)
    w2 = w.data.reshape(cout, -1)
    out = _gemm_conv(col, w2).reshape(n, cout, ho, wo)
    if b is not None:
        if b.data.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.reshape(n, cout, ho * wo)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.zeros((cout, col.shape[1]), dtype=gmat.dtype)
            for i in range(n):
                gw += gmat[i] @ col[i].T  # BLAS handles the transposed view
            w._accumulate(gw.reshape(w.data.shape))
        if x.requires_grad:
            # transposed conv: dilate grad by stride, full-pad, correlate with
            # the spatially flipped kernel, then crop off the forward padding
            if stride == 1:
                gd = g
            else:
                hd = (ho - 1) * stride + 1
                wdd = (wo - 1) * stride + 1
                gd = np.zeros((n, cout, hd, wdd), dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            gdp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gcol = _im2col(gdp, kh, kw, 1)
            wrot = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gx_full = _gemm_conv(gcol, wrot).reshape(n, cin, h + 2 * pad, wd + 2 * pad)
            if pad:
                gx_full = gx_full[:, :, pad : pad + h, pad : pad + wd]
            x._accumulate(np.ascontiguousarray(gx_full))

    return _make(out, parents, backward)


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, factor: int, dtype_name: str) -> np.ndarray:
    """1-D bilinear upsampling matrix, align-corners-false, edge-clamped."""
    n_out = n_in * factor
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    i0 = np.floor(coords).astype(np.int64)
    frac = coords - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=np.dtype(dtype_name))
    np.add.at(m, (np.arange(n_out), lo), (1.0 - frac).astype(m.dtype))
    np.add.at(m, (np.arange(n_out), hi), frac.astype(m.dtype))
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear NCHW upsampling by an integer factor (align-corners-false)."""
    if factor < 1:
        raise ConfigError(f"upsample_bilinear: factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise DimensionError(f"upsample_bilinear expects NCHW, got {x.data.shape}")
    if factor == 1:
        my = mx = None
        data = x.data
    else:
        _, _, h, wd = x.data.shape
        my = _interp_matrix(h, factor, x.data.dtype.name)
        mx = _interp_matrix(wd, factor, x.data.dtype.name)
        data = np.einsum("oh,nchw->ncow", my, x.data, optimize=True)
        data = np.einsum("pw,ncow->ncop", mx, data, optimize=True)

    def backward(g):
        if factor == 1:
            x._accumulate(g)
            return
        gg = np.einsum("pw,ncop->ncow", mx, g, optimize=True)
        gg = np.einsum("oh,ncow->nchw", my, gg, optimize=True)
        x._accumulate(gg)

    return _make(data, (x,), backward)


def _channel_axis(t: Tensor) -> int:
    if t.data.ndim == 4:
        return 1
    if t.data.ndim == 3:
        return 0
    raise DimensionError(f"expected CHW or NCHW, got shape {t.data.shape}")


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    ax = _channel_axis(x)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=ax, keepdims=True)
        x._accumulate(s * (g - dot))

    return _make(s, (x,), backward)


def log_softmax_channels(x: Tensor) -> Tensor:
    ax = _channel_axis(x)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    data = shifted - lse

    def backward(g):
        soft = np.exp(data)
        x._accumulate(g - soft * g.sum(axis=ax, keepdims=True))

    return _make(data, (x,), backward)


# -- gradient checking ---------------------------------------------------------


def grad_check(
    f: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-4
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued and rebuild its graph on every call. Inputs
    should be float64 ("check mode"); float32 finite differences are too
    noisy to validate against.  Error metric per coordinate:
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if eps <= 0:
        raise ConfigError(f"grad_check: eps must be positive, got {eps}")
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)  # FD below perturbs through a view
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise UsageError("grad_check: f must be scalar-valued")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    max_rel = 0.0
    with no_grad():
        for t, an in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data.reshape(()))
                flat[i] = orig - eps
                fm = float(f(*inputs).data.reshape(()))
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                rel = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
                max_rel = max(max_rel, rel)
    return max_rel
