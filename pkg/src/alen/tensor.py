"""Reverse-mode autodiff over numpy arrays.

Values are wrapped in :class:`Tensor`; every primitive below records a
closure that propagates the upstream gradient to its parents. The default
compute dtype is float32; passing float64 arrays keeps float64, which is how
the gradient-check harness runs its high-precision mode. Kernels use fixed
reduction orders so repeated runs are bit-identical.
"""

from __future__ import annotations

from contextvars import ContextVar
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, ConfigurationError, UsageError

# Per-context flag so concurrent evaluation threads cannot clobber each
# other's inference mode (a plain module global races under ThreadPoolExecutor).
_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)


def grad_enabled() -> bool:
    """True while operations record the autodiff graph in this context."""
    return _grad_enabled.get()


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._token = _grad_enabled.set(False)

    def __exit__(self, *exc):
        _grad_enabled.reset(self._token)
        return False


class Tensor:
    """A numpy array plus an optional slot in the autodiff graph.

    The array is treated as immutable once the tensor participates in a
    graph; only optimizer updates mutate ``data`` in place, between graphs.
    ``grad`` is filled by :meth:`backward` for every tensor on the path that
    has ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype == np.float64 and not isinstance(data, (np.ndarray, np.generic)):
            arr = arr.astype(np.float32)  # python scalars/lists default to f32
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level primitives
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        """Sum of all elements, as a scalar tensor."""
        out_data = self.data.sum()

        def backward_fn(g, x=self):
            _accumulate(x, np.broadcast_to(g, x.data.shape))

        return _make(out_data, (self,), backward_fn)

    def mean(self) -> "Tensor":
        """Mean of all elements, as a scalar tensor."""
        n = self.data.size
        out_data = self.data.sum() / n

        def backward_fn(g, x=self, n=n):
            _accumulate(x, np.broadcast_to(g / n, x.data.shape))

        return _make(out_data, (self,), backward_fn)

    def backward(self) -> None:
        """Propagate gradients from this scalar to every requires_grad tensor.

        Fan-out accumulates additively. Calling backward a second time on the
        same tensor (without rebuilding the graph) is rejected.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar, got shape {self.data.shape}")
        if self._backward_done:
            raise UsageError("backward() already ran on this tensor; re-run the forward pass first")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor with no recorded graph")
        self._backward_done = True

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root: Tensor) -> list:
    # iterative DFS; returns nodes in reverse topological order (root first)
    order: list = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited and p.requires_grad:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    order.reverse()
    return order


def _make(out_data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # sum a broadcast gradient back down to the operand's shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(x: Tensor, y: Tensor) -> Tensor:
    try:
        out_data = x.data + y.data
    except ValueError as e:
        raise DimensionError(f"add: incompatible shapes {x.shape} and {y.shape}") from e

    def backward_fn(g, x=x, y=y):
        _accumulate(x, _unbroadcast(g, x.data.shape))
        _accumulate(y, _unbroadcast(g, y.data.shape))

    return _make(out_data, (x, y), backward_fn)


def sub(x: Tensor, y: Tensor) -> Tensor:
    try:
        out_data = x.data - y.data
    except ValueError as e:
        raise DimensionError(f"sub: incompatible shapes {x.shape} and {y.shape}") from e

    def backward_fn(g, x=x, y=y):
        _accumulate(x, _unbroadcast(g, x.data.shape))
        _accumulate(y, _unbroadcast(-g, y.data.shape))

    return _make(out_data, (x, y), backward_fn)


def mul(x: Tensor, y: Tensor) -> Tensor:
    try:
        out_data = x.data * y.data
    except ValueError as e:
        raise DimensionError(f"mul: incompatible shapes {x.shape} and {y.shape}") from e

    def backward_fn(g, x=x, y=y):
        _accumulate(x, _unbroadcast(g * y.data, x.data.shape))
        _accumulate(y, _unbroadcast(g * x.data, y.data.shape))

    return _make(out_data, (x, y), backward_fn)


def div(x: Tensor, y: Tensor) -> Tensor:
    try:
        out_data = x.data / y.data
    except ValueError as e:
        raise DimensionError(f"div: incompatible shapes {x.shape} and {y.shape}") from e

    def backward_fn(g, x=x, y=y):
        _accumulate(x, _unbroadcast(g / y.data, x.data.shape))
        _accumulate(y, _unbroadcast(-g * x.data / (y.data * y.data), y.data.shape))

    return _make(out_data, (x, y), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = x.data * s

    def backward_fn(g, x=x, s=s):
        _accumulate(x, g * s)

    return _make(out_data, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    out_data = np.maximum(x.data, 0)

    def backward_fn(g, x=x):
        _accumulate(x, g * (x.data > 0))

    return _make(out_data, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    # computed via exp(-|x|) so neither branch can overflow
    z = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward_fn(g, x=x, y=out_data):
        _accumulate(x, g * y * (1.0 - y))

    return _make(out_data, (x,), backward_fn)


def absolute(x: Tensor) -> Tensor:
    """|x|; the subgradient at exactly 0 is 0."""
    out_data = np.abs(x.data)

    def backward_fn(g, x=x):
        _accumulate(x, g * np.sign(x.data))

    return _make(out_data, (x,), backward_fn)


def clamp01(x: Tensor) -> Tensor:
    """Clip to [0, 1]; gradient is passed only strictly inside the interval."""
    out_data = np.clip(x.data, 0.0, 1.0)

    def backward_fn(g, x=x):
        _accumulate(x, g * ((x.data > 0.0) & (x.data < 1.0)))

    return _make(out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# shape movement


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from e

    def backward_fn(g, x=x):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), backward_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    out_data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g, x=x, inverse=inverse):
        _accumulate(x, np.transpose(g, inverse))

    return _make(out_data, (x,), backward_fn)


def concat_channels(xs: Iterable[Tensor]) -> Tensor:
    """Concatenate 4-D tensors along the channel axis."""
    xs = tuple(xs)
    if not xs:
        raise DimensionError("concat_channels: empty input list")
    for t in xs:
        if t.data.ndim != 4:
            raise DimensionError(f"concat_channels: expected 4-D tensors, got {t.shape}")
        ref, cur = xs[0].shape, t.shape
        if (cur[0], cur[2], cur[3]) != (ref[0], ref[2], ref[3]):
            raise DimensionError(f"concat_channels: mismatched N/H/W between {ref} and {cur}")
    out_data = np.concatenate([t.data for t in xs], axis=1)
    splits = [t.shape[1] for t in xs]

    def backward_fn(g, xs=xs, splits=splits):
        start = 0
        for t, c in zip(xs, splits):
            _accumulate(t, g[:, start:start + c])
            start += c

    return _make(out_data, xs, backward_fn)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth: (N,C,H,W) -> (N,C*r*r,H/r,W/r).

    out[n, c*r*r + dy*r + dx, y, x] = in[n, c, y*r + dy, x*r + dx].
    """
    n, c, h, w = _require4d(x, "pixel_unshuffle")
    r = int(r)
    if r < 1:
        raise ConfigurationError(f"pixel_unshuffle: factor {r} < 1")
    if h % r or w % r:
        raise DimensionError(f"pixel_unshuffle: H,W {h}x{w} not divisible by {r}")
    out_data = (
        x.data.reshape(n, c, h // r, r, w // r, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h // r, w // r)
    )

    def backward_fn(g, x=x, n=n, c=c, h=h, w=w, r=r):
        gi = (
            g.reshape(n, c, r, r, h // r, w // r)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h, w)
        )
        _accumulate(x, gi)

    return _make(np.ascontiguousarray(out_data), (x,), backward_fn)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: (N,C,H,W) -> (N,C/(r*r),H*r,W*r); inverse of pixel_unshuffle."""
    n, c, h, w = _require4d(x, "pixel_shuffle")
    r = int(r)
    if r < 1:
        raise ConfigurationError(f"pixel_shuffle: factor {r} < 1")
    if c % (r * r):
        raise DimensionError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    co = c // (r * r)
    out_data = (
        x.data.reshape(n, co, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, co, h * r, w * r)
    )

    def backward_fn(g, x=x, n=n, co=co, h=h, w=w, r=r):
        gi = (
            g.reshape(n, co, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, co * r * r, h, w)
        )
        _accumulate(x, gi)

    return _make(np.ascontiguousarray(out_data), (x,), backward_fn)


# ---------------------------------------------------------------------------
# pooling


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first (row-major) argmax."""
    n, c, h, w = _require4d(x, "max_pool2")
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2: H,W {h}x{w} must be even")
    win = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = np.argmax(win, axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g, x=x, idx=idx, n=n, c=c, h=h, w=w):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gi = (
            gw.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        _accumulate(x, gi)

    return _make(np.ascontiguousarray(out_data), (x,), backward_fn)


def avg_pool2(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling (kernel == stride)."""
    n, c, h, w = _require4d(x, "avg_pool2")
    k = int(k)
    if k < 1:
        raise ConfigurationError(f"avg_pool2: factor {k} < 1")
    if h % k or w % k:
        raise DimensionError(f"avg_pool2: H,W {h}x{w} not divisible by {k}")
    out_data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward_fn(g, x=x, k=k):
        gi = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        _accumulate(x, gi)

    return _make(out_data, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel, shape (N,C,1,1)."""
    _require4d(x, "global_avg_pool")
    out_data = x.data.mean(axis=(2, 3), keepdims=True)
    hw = x.shape[2] * x.shape[3]

    def backward_fn(g, x=x, hw=hw):
        _accumulate(x, np.broadcast_to(g / hw, x.data.shape))

    return _make(out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; accepts 2-D operands or 3-D with a shared batch axis."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise DimensionError(f"matmul: ranks {a.data.ndim} and {b.data.ndim} unsupported")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape} x {b.shape}")
    if a.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch dims {a.shape[0]} != {b.shape[0]}")
    out_data = a.data @ b.data

    def backward_fn(g, a=a, b=b):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), backward_fn)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Shift-stabilized softmax along one axis."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g, x=x, y=out_data, axis=axis):
        gy = g * y
        _accumulate(x, gy - y * gy.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# convolutions


def _require4d(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise DimensionError(f"{op}: expected a 4-D tensor, got shape {x.shape}")
    return x.shape


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,Ci,H,W) with (Co,Ci,kh,kw) filters (no kernel flip).

    Zero padding; the output size (H + 2p - kh)/stride + 1 must divide exactly.
    """
    n, ci, h, w = _require4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d: weight must be 4-D, got {weight.shape}")
    co, wci, kh, kw = weight.shape
    if wci != ci:
        raise DimensionError(f"conv2d: input has {ci} channels, weight expects {wci}")
    if (kh % 2 == 0 and kh != 1) or (kw % 2 == 0 and kw != 1):
        raise ConfigurationError(f"conv2d: kernel {kh}x{kw} must be odd or 1")
    stride, padding = int(stride), int(padding)
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: {h}x{w} too small for kernel {kh}x{kw} at padding {padding}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ConfigurationError(
            f"conv2d: size {h}x{w} with padding {padding}, kernel {kh}x{kw}, "
            f"stride {stride} does not divide exactly")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)            # (N*Ho*Wo, Ci*kh*kw)
    out_data = cols @ weight.data.reshape(co, -1).T        # (N*Ho*Wo, Co)
    out_data = out_data.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g, x=x, weight=weight, bias=bias, stride=stride, padding=padding,
                    ho=ho, wo=wo, kh=kh, kw=kw):
        n, ci, h, w = x.shape
        co = weight.shape[0]
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)     # (N*Ho*Wo, Co)
        if weight.requires_grad:
            xp = x.data
            if padding:
                xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            cols = _im2col(xp, kh, kw, stride, ho, wo)
            _accumulate(weight, (gmat.T @ cols).reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gp = np.zeros((n, ci, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for ky in range(kh):
                for kx in range(kw):
                    t = np.tensordot(g, weight.data[:, :, ky, kx], axes=([1], [0]))
                    t = np.moveaxis(t, 3, 1)               # (N,Ci,Ho,Wo)
                    gp[:, :, ky:ky + stride * (ho - 1) + 1:stride,
                       kx:kx + stride * (wo - 1) + 1:stride] += t
            if padding:
                gp = gp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, gp)

    return _make(np.ascontiguousarray(out_data), parents, backward_fn)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                    # (N,Ci,Ho,Wo,kh,kw)
    n, ci = xp.shape[0], xp.shape[1]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * kh * kw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1) -> Tensor:
    """Transposed convolution, the adjoint of conv2d as a linear map.

    Weight layout is (Cin, Cout, kh, kw); output spatial size is
    (H-1)*stride + kh, so kernel 2 with stride 2 exactly doubles H and W.
    """
    n, ci, h, w = _require4d(x, "conv_transpose2d")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv_transpose2d: weight must be 4-D, got {weight.shape}")
    wci, co, kh, kw = weight.shape
    if wci != ci:
        raise DimensionError(f"conv_transpose2d: input has {ci} channels, weight expects {wci}")
    stride = int(stride)
    if stride < 1:
        raise ConfigurationError(f"conv_transpose2d: stride {stride} < 1")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv_transpose2d: bias shape {bias.shape} != ({co},)")
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw

    out_data = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            t = np.tensordot(x.data, weight.data[:, :, ky, kx], axes=([1], [0]))
            out_data[:, :, ky:ky + stride * (h - 1) + 1:stride,
                     kx:kx + stride * (w - 1) + 1:stride] += np.moveaxis(t, 3, 1)
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g, x=x, weight=weight, bias=bias, stride=stride, kh=kh, kw=kw):
        n, ci, h, w = x.shape
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        for ky in range(kh):
            for kx in range(kw):
                gs = g[:, :, ky:ky + stride * (h - 1) + 1:stride,
                       kx:kx + stride * (w - 1) + 1:stride]      # (N,Co,H,W)
                if x.requires_grad:
                    t = np.tensordot(gs, weight.data[:, :, ky, kx], axes=([1], [1]))
                    _accumulate(x, np.moveaxis(t, 3, 1))
                if weight.requires_grad:
                    gw = np.einsum("nihw,nohw->io", x.data, gs)
                    full = np.zeros_like(weight.data)
                    full[:, :, ky, kx] = gw
                    _accumulate(weight, full)

    return _make(out_data, parents, backward_fn)
