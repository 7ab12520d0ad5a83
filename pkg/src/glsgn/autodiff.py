"""Dense float tensors with reverse-mode differentiation.

The operator set is exactly what the restoration network needs: 2-D
convolution, bilinear resizing, 2x average-pool downsampling, a small family
of pointwise nonlinearities, channel concatenation and statistics, spatial
cropping, reshape, reductions and broadcasting arithmetic.

Every op records its inputs and a backward closure on the output tensor;
``backward`` replays the recorded graph once, in reverse execution order.
Float32 is the training dtype, float64 the gradient-check dtype; ops never
mix the two silently.  Single-threaded execution is bit-deterministic.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DIFFERENTIABLE_OPS",
    "add",
    "sub",
    "mul",
    "div",
    "apply_elementwise",
    "clip01",
    "conv2d",
    "resize_bilinear",
    "downsample2x",
    "concat",
    "concat_channels",
    "channel_stats",
    "spatial_crop",
    "backward",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
]

# Every op with a backward rule; the gradient-check suite must cover each
# one (enforced by cmd_gradcheck and the test suite).
DIFFERENTIABLE_OPS: frozenset[str] = frozenset({
    "add", "sub", "mul", "div",
    "relu", "leaky_relu", "sigmoid", "tanh", "abs", "clip01",
    "sum", "mean", "reshape",
    "conv2d", "resize_bilinear", "downsample2x",
    "concat", "spatial_crop", "slice_axis0", "channel_stats",
})

# Global execution counter.  next() on itertools.count is atomic under the
# GIL, so ids are unique across threads; within one (single-threaded) graph
# they give the execution order used for the backward sweep.
_EXEC_COUNTER = itertools.count()

_VALID_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """An operand shape violates an operator's contract."""


class Tensor:
    """A dense float array plus an optional slot in the backward graph.

    ``data`` is always a C-contiguous float32 or float64 ndarray.  ``grad``
    is populated by :func:`backward` for tensors with ``requires_grad``.
    Non-leaf tensors additionally carry the parent references and the
    backward closure recorded by the op that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_bwd", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _VALID_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None
        self._seq = next(_EXEC_COUNTER)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, op: str, parents: Sequence["Tensor"],
              bwd: Callable[[np.ndarray], None] | None) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._bwd = bwd
        else:
            out._parents = ()
            out._bwd = None
        out._seq = next(_EXEC_COUNTER)
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() on tensor of shape {self.shape}")

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- graph utilities -------------------------------------------------------

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def abs(self) -> "Tensor":
        return apply_elementwise(self, "abs")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=True)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_same_dtype("add", a, b)
    out_data = a.data + b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._node(out_data, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_same_dtype("sub", a, b)
    out_data = a.data - b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._node(out_data, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_same_dtype("mul", a, b)
    out_data = a.data * b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._node(out_data, "mul", (a, b), bwd)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_same_dtype("div", a, b)
    out_data = a.data / b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._node(out_data, "div", (a, b), bwd)


# -- pointwise nonlinearities -----------------------------------------------------

LEAKY_SLOPE = 0.2


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ELEMENTWISE: dict[str, tuple[Callable, Callable]] = {
    # name -> (forward, local derivative given (x, y))
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(x.dtype)),
    "leaky_relu": (
        lambda x: np.where(x >= 0, x, LEAKY_SLOPE * x),
        lambda x, y: np.where(x >= 0, 1.0, LEAKY_SLOPE).astype(x.dtype),
    ),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "abs": (np.abs, lambda x, y: np.sign(x)),
}


def apply_elementwise(t: Tensor, fn: str) -> Tensor:
    """Pointwise map; ``fn`` is one of relu, leaky_relu, sigmoid, tanh, abs."""
    if fn not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise fn {fn!r}; valid: {sorted(_ELEMENTWISE)}")
    fwd, deriv = _ELEMENTWISE[fn]
    out_data = fwd(t.data).astype(t.data.dtype, copy=False)

    def bwd(g: np.ndarray) -> None:
        t._accumulate(g * deriv(t.data, out_data))

    return Tensor._node(out_data, fn, (t,), bwd)


def relu(t: Tensor) -> Tensor:
    return apply_elementwise(t, "relu")


def leaky_relu(t: Tensor) -> Tensor:
    return apply_elementwise(t, "leaky_relu")


def sigmoid(t: Tensor) -> Tensor:
    return apply_elementwise(t, "sigmoid")


def tanh(t: Tensor) -> Tensor:
    return apply_elementwise(t, "tanh")


def clip01(t: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient passes through the closed interval."""
    out_data = np.clip(t.data, 0.0, 1.0)

    def bwd(g: np.ndarray) -> None:
        mask = (t.data >= 0.0) & (t.data <= 1.0)
        t._accumulate(g * mask.astype(t.data.dtype))

    return Tensor._node(out_data, "clip01", (t,), bwd)


# -- reductions and reshape -------------------------------------------------------


def _reduce(t: Tensor, axis, keepdims: bool, mean: bool) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    if mean:
        out_data = t.data.mean(axis=axis, keepdims=keepdims, dtype=t.data.dtype)
    else:
        out_data = t.data.sum(axis=axis, keepdims=keepdims, dtype=t.data.dtype)
    count = 1
    if mean:
        count = t.data.size if axis is None else int(np.prod([t.shape[i] for i in axis]))
    op = "mean" if mean else "sum"

    def bwd(g: np.ndarray) -> None:
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        gg = np.broadcast_to(gg, t.shape).astype(t.data.dtype)
        t._accumulate(gg / count if mean else gg)

    return Tensor._node(np.asarray(out_data), op, (t,), bwd)


def reshape(t: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = t.data.reshape(shape)

    def bwd(g: np.ndarray) -> None:
        t._accumulate(g.reshape(t.shape))

    return Tensor._node(np.ascontiguousarray(out_data), "reshape", (t,), bwd)


# -- convolution -------------------------------------------------------------------


def conv2d(inp: Tensor, weight: Tensor, bias: Tensor | None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    inp: (B, C, H, W); weight: (O, C, kH, kW); bias: (O,) or None.
    Output spatial size is floor((H + 2*padding - kH) / stride) + 1.
    """
    if inp.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (B,C,H,W), got {inp.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (O,C,kH,kW), got {weight.shape}")
    B, C, H, W = inp.shape
    O, Cw, kH, kW = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input channels C={C} do not match weight channels C={Cw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match out channels O={O}")
    if H + 2 * padding < kH or W + 2 * padding < kW:
        raise ShapeError(
            f"conv2d: padded input {H + 2 * padding}x{W + 2 * padding} smaller than kernel {kH}x{kW}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    _check_same_dtype("conv2d", *(t for t in (inp, weight, bias) if t is not None))

    Ho = (H + 2 * padding - kH) // stride + 1
    Wo = (W + 2 * padding - kW) // stride + 1

    if padding:
        xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=inp.data.dtype)
        xp[:, :, padding:padding + H, padding:padding + W] = inp.data
    else:
        xp = inp.data

    # im2col: (B, C, kH, kW, Ho, Wo) assembled with kH*kW strided copies,
    # flattened for batched matmul against the (O, C*kH*kW) weight matrix
    patches = np.empty((B, C, kH, kW, Ho, Wo), dtype=inp.data.dtype)
    for i in range(kH):
        for j in range(kW):
            patches[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = patches.reshape(B, C * kH * kW, Ho * Wo)

    w2d = weight.data.reshape(O, -1)
    out_data = np.matmul(w2d, cols).reshape(B, O, Ho, Wo)
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    parents = (inp, weight) if bias is None else (inp, weight, bias)

    def bwd(g: np.ndarray) -> None:
        g2 = g.reshape(B, O, Ho * Wo)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(dw.reshape(weight.shape))
        if inp.requires_grad:
            dpatch = np.matmul(w2d.T, g2).reshape(B, C, kH, kW, Ho, Wo)
            dxp = np.zeros_like(xp) if padding else np.zeros((B, C, H, W), dtype=g.dtype)
            for i in range(kH):
                for j in range(kW):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dpatch[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:padding + H, padding:padding + W]
            inp._accumulate(dxp)

    return Tensor._node(out_data, "conv2d", parents, bwd)


# -- resampling --------------------------------------------------------------------


def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, align-corners=false."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        w = src - lo
        m[o, lo] += 1.0 - w
        m[o, hi] += w
    return m.astype(dtype)


def resize_bilinear(t: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize (align-corners=false); exact on constant inputs."""
    if t.ndim != 4:
        raise ShapeError(f"resize_bilinear: input must be 4-D, got {t.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: target size {out_h}x{out_w} must be >= 1")
    B, C, H, W = t.shape
    if (out_h, out_w) == (H, W):
        def bwd_id(g: np.ndarray) -> None:
            t._accumulate(g)
        return Tensor._node(t.data.copy(), "resize_bilinear", (t,), bwd_id)

    ry = _bilinear_matrix(H, out_h, t.data.dtype)
    rx = _bilinear_matrix(W, out_w, t.data.dtype)

    # out[b,c,o,p] = sum_hw ry[o,h] x[b,c,h,w] rx[p,w]
    tmp = np.tensordot(t.data, ry, axes=([2], [1]))      # (B, C, W, out_h)
    out_data = np.tensordot(tmp, rx, axes=([2], [1]))    # (B, C, out_h, out_w)
    out_data = np.ascontiguousarray(out_data)

    def bwd(g: np.ndarray) -> None:
        tmp_g = np.tensordot(g, ry, axes=([2], [0]))     # (B, C, out_w, H)
        dx = np.tensordot(tmp_g, rx, axes=([2], [0]))    # (B, C, H, W)
        t._accumulate(np.ascontiguousarray(dx))

    return Tensor._node(out_data, "resize_bilinear", (t,), bwd)


def downsample2x(t: Tensor) -> Tensor:
    """2x2 average pooling; the fixed downsampling operator of the pyramid."""
    if t.ndim != 4:
        raise ShapeError(f"downsample2x: input must be 4-D, got {t.shape}")
    B, C, H, W = t.shape
    if H % 2 or W % 2:
        raise ShapeError(f"downsample2x: spatial dims must be even, got {H}x{W}")
    r = t.data.reshape(B, C, H // 2, 2, W // 2, 2)
    out_data = r.mean(axis=(3, 5), dtype=t.data.dtype)

    def bwd(g: np.ndarray) -> None:
        gg = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        t._accumulate(gg * np.asarray(0.25, dtype=t.data.dtype))

    return Tensor._node(np.ascontiguousarray(out_data), "downsample2x", (t,), bwd)


# -- structure ops -----------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; backward splits the gradient."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    _check_same_dtype("concat", *parts)
    nd = parts[0].ndim
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {p.ndim} vs {nd}")
        for ax in range(nd):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ShapeError(
                    f"concat: dim {ax} mismatch {p.shape[ax]} vs {parts[0].shape[ax]}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bwd(g: np.ndarray) -> None:
        sl = [slice(None)] * nd
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl[axis] = slice(int(start), int(stop))
                p._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return Tensor._node(out_data, "concat", tuple(parts), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis of (B, C, H, W) tensors."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels: inputs must be 4-D, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}; resize first")
    return concat([a, b], axis=1)


def spatial_crop(t: Tensor, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    """Slice rows [y0:y1) and cols [x0:x1); backward zero-embeds."""
    if t.ndim != 4:
        raise ShapeError(f"spatial_crop: input must be 4-D, got {t.shape}")
    B, C, H, W = t.shape
    if not (0 <= y0 < y1 <= H and 0 <= x0 < x1 <= W):
        raise ShapeError(f"spatial_crop: window [{y0}:{y1},{x0}:{x1}] outside {H}x{W}")
    out_data = np.ascontiguousarray(t.data[:, :, y0:y1, x0:x1])

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(t.data)
        full[:, :, y0:y1, x0:x1] = g
        t._accumulate(full)

    return Tensor._node(out_data, "spatial_crop", (t,), bwd)


def slice_axis0(t: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start:stop) along the leading axis; backward zero-embeds."""
    if not 0 <= start < stop <= t.shape[0]:
        raise ShapeError(f"slice_axis0: window [{start}:{stop}) outside {t.shape[0]} rows")
    out_data = np.ascontiguousarray(t.data[start:stop])

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(t.data)
        full[start:stop] = g
        t._accumulate(full)

    return Tensor._node(out_data, "slice_axis0", (t,), bwd)


def channel_stats(t: Tensor) -> Tensor:
    """Per-pixel mean and max over channels -> (B, 2, H, W).

    Channel 0 is the mean, channel 1 the max; the max gradient routes to the
    first argmax in channel order.
    """
    if t.ndim != 4:
        raise ShapeError(f"channel_stats: input must be 4-D, got {t.shape}")
    B, C, H, W = t.shape
    if C < 1:
        raise ShapeError("channel_stats: need at least one channel")
    mean = t.data.mean(axis=1, keepdims=True, dtype=t.data.dtype)
    amax_idx = t.data.argmax(axis=1)             # first argmax on ties
    amax = np.take_along_axis(t.data, amax_idx[:, None], axis=1)
    out_data = np.concatenate([mean, amax], axis=1)

    def bwd(g: np.ndarray) -> None:
        dg = np.empty_like(t.data)
        dg[:] = g[:, 0:1] / C
        onehot = np.zeros_like(t.data)
        np.put_along_axis(onehot, amax_idx[:, None], 1.0, axis=1)
        dg += onehot * g[:, 1:2]
        t._accumulate(dg)

    return Tensor._node(out_data, "channel_stats", (t,), bwd)


# -- backward sweep ----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad tensor.

    ``loss`` must be scalar.  Ops run exactly once, in reverse execution
    order; non-leaf graph records are released afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad; nothing to differentiate")

    # iterative reachability sweep (graphs are deep; no recursion)
    seen: set[int] = {id(loss)}
    nodes: list[Tensor] = [loss]
    stack: list[Tensor] = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)

    nodes.sort(key=lambda n: n._seq, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
    # release the graph: a second backward over the same records is invalid
    for node in nodes:
        if node._bwd is not None:
            node._parents = ()
            node._bwd = None
            if node is not loss:
                node.grad = None
