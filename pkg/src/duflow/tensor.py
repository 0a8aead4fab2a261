"""Rank-4 tensors with tape-based reverse-mode differentiation.

The op set is exactly what the flow network and its losses need: dilated
convolution, leaky rectifier, channel concat, bilinear resize, masked mean,
and a handful of elementwise/spatial helpers. Everything runs on numpy
arrays in NCHW layout; convolutions are im2col + GEMM so the heavy lifting
stays inside BLAS.

Gradients are recorded on an explicit `Graph` tape. Ops append one entry in
execution order; `Graph.backward` seeds 1.0 at a scalar node and replays the
tape in exact reverse order, accumulating into `.grad` buffers additively.
A graph is meant to be built fresh for every training step.

Bilinear convention (used by `resize_bilinear` and shared with the warper's
oracle): align-corners-false. Output sample i reads the source coordinate

    src = (i + 0.5) * (in_size / out_size) - 0.5

clamped to [0, in_size - 1], then interpolates linearly between floor(src)
and floor(src)+1 (the upper index itself clamped to the last sample).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError, MaskEmptyError, ShapeError


class Tensor4:
    """Dense (batch, channels, height, width) array with an optional grad slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs a rank-4 array, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, own: bool = False):
        """Add a gradient contribution. `own=True` promises `g` is a fresh
        array nothing else aliases, letting the first contribution be stored
        without a copy."""
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def detached(self) -> "Tensor4":
        return Tensor4(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor4(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class FilterBank:
    """Convolution weights, laid out (out_channels, in_channels, kh, kw).

    Kernels must be odd-sized on both axes; every kernel in this project is.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"FilterBank needs a rank-4 array, got shape {arr.shape}")
        if arr.shape[2] % 2 == 0 or arr.shape[3] % 2 == 0:
            raise ShapeError(f"FilterBank kernels must be odd-sized, got {arr.shape[2]}x{arr.shape[3]}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, own: bool = False):
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match filter shape {self.data.shape}"
            )
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g


@dataclass(frozen=True)
class ConvSpec:
    """Stride / dilation / zero-padding of one convolution.

    For a same-resolution layer with odd kernel k, use padding = dilation*(k-1)//2.
    """

    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeError(
                f"bad ConvSpec: stride={self.stride} dilation={self.dilation} padding={self.padding}"
            )


class Bias:
    """Per-channel additive bias for conv layers; rank-1 parameter."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 1:
            raise ShapeError(f"Bias needs a rank-1 array, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, own: bool = False):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match bias shape {self.data.shape}")
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g


def conv_output_size(size: int, kernel: int, spec: ConvSpec) -> int:
    return (size + 2 * spec.padding - spec.dilation * (kernel - 1) - 1) // spec.stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """(N,C,H,W) -> (N, kh*kw*C, oh*ow) patch matrix, tap-major.

    Tap-major layout keeps each tap's destination block contiguous, so the
    per-tap copies run at memory bandwidth. The matching weight flattening
    is filters.transpose(0, 2, 3, 1).
    """
    n, c, h, w = x.shape
    p, s, d = spec.padding, spec.stride, spec.dilation
    if p > 0:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p : p + h, p : p + w] = x
    else:
        xp = x
    cols = np.empty((n, kh, kw, c, oh, ow), dtype=x.dtype)
    for a in range(kh):
        ra = a * d
        for b in range(kw):
            cb = b * d
            cols[:, a, b] = xp[:, :, ra : ra + (oh - 1) * s + 1 : s, cb : cb + (ow - 1) * s + 1 : s]
    return cols.reshape(n, kh * kw * c, oh * ow)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the input."""
    n, c, h, w = x_shape
    p, s, d = spec.padding, spec.stride, spec.dilation
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    dcols = dcols.reshape(n, kh, kw, c, oh, ow)
    for a in range(kh):
        ra = a * d
        for b in range(kw):
            cb = b * d
            dxp[:, :, ra : ra + (oh - 1) * s + 1 : s, cb : cb + (ow - 1) * s + 1 : s] += dcols[:, a, b]
    if p > 0:
        return dxp[:, :, p : p + h, p : p + w]
    return dxp


_RESIZE_CACHE: dict = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """(n_out, n_in) row-stochastic bilinear sampling matrix, align-corners-false."""
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _RESIZE_CACHE.get(key)
    if m is not None:
        return m
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    w0 = 1.0 - w1
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[np.arange(n_out), i0] += w0
    m[np.arange(n_out), i1] += w1
    m = m.astype(dtype)
    if len(_RESIZE_CACHE) < 256:
        _RESIZE_CACHE[key] = m
    return m


class Graph:
    """Execution tape. Ops are methods; backward replays in reverse order."""

    def __init__(self):
        self._tape = []
        self._swept = False

    def __len__(self):
        return len(self._tape)

    def reset(self):
        self._tape.clear()
        self._swept = False

    def _emit(self, out_data: np.ndarray, parents, backward_fn) -> Tensor4:
        req = any(p.requires_grad for p in parents)
        out = Tensor4(out_data, requires_grad=req)
        if req:
            self._tape.append((out, backward_fn))
        return out

    # ------------------------------------------------------------------ #
    # structural ops

    def conv2d(self, x: Tensor4, filters: FilterBank, bias: Bias | None, spec: ConvSpec) -> Tensor4:
        """Cross-correlation with holes of size (dilation-1) between taps."""
        n, c, h, w = x.shape
        oc, ic, kh, kw = filters.shape
        if c != ic:
            raise ShapeError(
                f"conv2d channel mismatch: input {x.shape} has {c} channels, filters {filters.shape} expect {ic}"
            )
        oh = conv_output_size(h, kh, spec)
        ow = conv_output_size(w, kw, spec)
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv2d output would be {oh}x{ow} for input {h}x{w}, kernel {kh}x{kw}, {spec}"
            )
        cols = _im2col(x.data, kh, kw, spec, oh, ow)
        w2d = np.ascontiguousarray(filters.data.transpose(0, 2, 3, 1)).reshape(oc, kh * kw * ic)
        out = np.matmul(w2d, cols)  # (N, oc, oh*ow)
        if bias is not None:
            out += bias.data[None, :, None]
        out = out.reshape(n, oc, oh, ow)

        def backward(gout: np.ndarray):
            g2d = gout.reshape(n, oc, oh * ow)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g2d.sum(axis=(0, 2)), own=True)
            if filters.requires_grad:
                # batched GEMM against the transposed patch view, summed over
                # the batch: BLAS handles the transpose without a copy
                dw = np.matmul(g2d, cols.transpose(0, 2, 1)).sum(axis=0)
                dw = dw.reshape(oc, kh, kw, ic).transpose(0, 3, 1, 2)
                filters.accumulate_grad(np.ascontiguousarray(dw), own=True)
            if x.requires_grad:
                dcols = np.matmul(w2d.T, g2d)
                x.accumulate_grad(_col2im(dcols, x.shape, kh, kw, spec, oh, ow), own=True)

        return self._emit(out, (x, filters) if bias is None else (x, filters, bias), backward)

    def concat_channels(self, inputs) -> Tensor4:
        inputs = list(inputs)
        if not inputs:
            raise ShapeError("concat_channels needs at least one input")
        n, _, h, w = inputs[0].shape
        for t in inputs[1:]:
            tn, _, th, tw = t.shape
            if (tn, th, tw) != (n, h, w):
                raise ShapeError(
                    f"concat_channels spatial mismatch: {inputs[0].shape} vs {t.shape}"
                )
        out = np.concatenate([t.data for t in inputs], axis=1)
        splits = np.cumsum([t.shape[1] for t in inputs])[:-1]

        def backward(gout: np.ndarray):
            for t, piece in zip(inputs, np.split(gout, splits, axis=1)):
                if t.requires_grad:
                    t.accumulate_grad(piece)

        return self._emit(out, inputs, backward)

    def resize_bilinear(self, x: Tensor4, out_h: int, out_w: int) -> Tensor4:
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"resize_bilinear target {out_h}x{out_w} is empty")
        n, c, h, w = x.shape
        if (out_h, out_w) == (h, w):
            return self.identity(x)
        rh = _resize_matrix(h, out_h, x.dtype)
        rw = _resize_matrix(w, out_w, x.dtype)
        flat = x.data.reshape(n * c, h, w)
        out = np.matmul(np.matmul(rh, flat), rw.T).reshape(n, c, out_h, out_w)

        def backward(gout: np.ndarray):
            if x.requires_grad:
                g = gout.reshape(n * c, out_h, out_w)
                x.accumulate_grad(np.matmul(np.matmul(rh.T, g), rw).reshape(x.shape), own=True)

        return self._emit(out, (x,), backward)

    def crop(self, x: Tensor4, top: int, left: int, height: int, width: int) -> Tensor4:
        n, c, h, w = x.shape
        if top < 0 or left < 0 or top + height > h or left + width > w or height < 1 or width < 1:
            raise ShapeError(f"crop [{top}:{top+height}, {left}:{left+width}] out of range for {x.shape}")
        out = x.data[:, :, top : top + height, left : left + width].copy()

        def backward(gout: np.ndarray):
            if x.requires_grad:
                g = np.zeros(x.shape, dtype=gout.dtype)
                g[:, :, top : top + height, left : left + width] = gout
                x.accumulate_grad(g, own=True)

        return self._emit(out, (x,), backward)

    def shift2d(self, x: Tensor4, dy: int, dx: int) -> Tensor4:
        """Translate by an integer offset with edge-clamped sampling.

        out(y, x) = in(clip(y+dy), clip(x+dx)); the adjoint accumulates the
        rows/columns that clamp onto the border sample.
        """
        n, c, h, w = x.shape
        iy = np.clip(np.arange(h) + dy, 0, h - 1)
        ix = np.clip(np.arange(w) + dx, 0, w - 1)
        out = x.data[:, :, iy[:, None], ix[None, :]]

        def backward(gout: np.ndarray):
            if not x.requires_grad:
                return
            g = _shift_adjoint_axis(gout, dy, axis=2)
            g = _shift_adjoint_axis(g, dx, axis=3)
            x.accumulate_grad(g, own=(dy != 0 or dx != 0))

        return self._emit(out, (x,), backward)

    def slice_batch(self, x: Tensor4, start: int, stop: int) -> Tensor4:
        n = x.shape[0]
        if not 0 <= start < stop <= n:
            raise ShapeError(f"slice_batch [{start}:{stop}] out of range for {x.shape}")
        out = x.data[start:stop].copy()

        def backward(gout: np.ndarray):
            if x.requires_grad:
                g = np.zeros(x.shape, dtype=gout.dtype)
                g[start:stop] = gout
                x.accumulate_grad(g, own=True)

        return self._emit(out, (x,), backward)

    def take_channel(self, x: Tensor4, idx: int) -> Tensor4:
        n, c, h, w = x.shape
        if not 0 <= idx < c:
            raise ShapeError(f"take_channel index {idx} out of range for {x.shape}")
        out = x.data[:, idx : idx + 1].copy()

        def backward(gout: np.ndarray):
            if x.requires_grad:
                g = np.zeros(x.shape, dtype=gout.dtype)
                g[:, idx : idx + 1] = gout
                x.accumulate_grad(g, own=True)

        return self._emit(out, (x,), backward)

    def identity(self, x: Tensor4) -> Tensor4:
        out = x.data.copy()

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(gout)

        return self._emit(out, (x,), backward)

    def stop_gradient(self, x: Tensor4) -> Tensor4:
        return Tensor4(x.data.copy(), requires_grad=False)

    # ------------------------------------------------------------------ #
    # elementwise ops

    def leaky_relu(self, x: Tensor4, slope: float) -> Tensor4:
        if not 0.0 < slope < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
        neg = x.data < 0
        out = np.where(neg, x.data * x.dtype.type(slope), x.data)

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(np.where(neg, gout * gout.dtype.type(slope), gout), own=True)

        return self._emit(out, (x,), backward)

    def add(self, x: Tensor4, y: Tensor4) -> Tensor4:
        _same_shape(x, y, "add")
        out = x.data + y.data

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(gout)
            if y.requires_grad:
                y.accumulate_grad(gout)

        return self._emit(out, (x, y), backward)

    def sub(self, x: Tensor4, y: Tensor4) -> Tensor4:
        _same_shape(x, y, "sub")
        out = x.data - y.data

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(gout)
            if y.requires_grad:
                y.accumulate_grad(-gout, own=True)

        return self._emit(out, (x, y), backward)

    def mul(self, x: Tensor4, y: Tensor4) -> Tensor4:
        _same_shape(x, y, "mul")
        out = x.data * y.data

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(gout * y.data, own=True)
            if y.requires_grad:
                y.accumulate_grad(gout * x.data, own=True)

        return self._emit(out, (x, y), backward)

    def div(self, x: Tensor4, y: Tensor4) -> Tensor4:
        _same_shape(x, y, "div")
        inv = 1.0 / y.data
        out = x.data * inv

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(gout * inv, own=True)
            if y.requires_grad:
                y.accumulate_grad(-gout * out * inv, own=True)

        return self._emit(out, (x, y), backward)

    def scale(self, x: Tensor4, s: float) -> Tensor4:
        s = x.dtype.type(s)
        out = x.data * s

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(gout * s, own=True)

        return self._emit(out, (x,), backward)

    def add_scalar(self, x: Tensor4, s: float) -> Tensor4:
        out = x.data + x.dtype.type(s)

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(gout)

        return self._emit(out, (x,), backward)

    def pow_scalar(self, x: Tensor4, p: float) -> Tensor4:
        """x**p elementwise; callers keep the base strictly positive for p < 1."""
        out = np.power(x.data, x.dtype.type(p))

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(gout * x.dtype.type(p) * np.power(x.data, x.dtype.type(p - 1.0)), own=True)

        return self._emit(out, (x,), backward)

    # ------------------------------------------------------------------ #
    # reductions

    def sum_channels(self, x: Tensor4) -> Tensor4:
        out = x.data.sum(axis=1, keepdims=True)

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(np.broadcast_to(gout, x.shape).copy(), own=True)

        return self._emit(out, (x,), backward)

    def reduce_mean(self, x: Tensor4, mask: Tensor4 | None = None) -> Tensor4:
        """Scalar mean, optionally over a {0,1} mask: sum(x*m)/sum(m).

        The mask is a constant: no gradient flows into it. An all-zero mask
        raises MaskEmptyError (callers that want a fallback catch it).
        """
        if mask is None:
            count = x.data.size
            out = x.data.sum(dtype=x.dtype) / x.dtype.type(count)

            def backward(gout: np.ndarray):
                if x.requires_grad:
                    g = np.full(x.shape, gout.ravel()[0] / x.dtype.type(count), dtype=x.dtype)
                    x.accumulate_grad(g, own=True)

            return self._emit(out.reshape(1, 1, 1, 1), (x,), backward)

        _same_shape(x, mask, "reduce_mean mask")
        msum = mask.data.sum(dtype=np.float64)
        if msum <= 0:
            raise MaskEmptyError("reduce_mean mask sums to zero")
        msum = x.dtype.type(msum)
        out = (x.data * mask.data).sum(dtype=x.dtype) / msum

        def backward(gout: np.ndarray):
            if x.requires_grad:
                x.accumulate_grad(mask.data * (gout.ravel()[0] / msum), own=True)

        return self._emit(out.reshape(1, 1, 1, 1), (x, mask), backward)

    # ------------------------------------------------------------------ #

    def backward(self, loss: Tensor4):
        """Reverse sweep from a scalar node; gradients accumulate additively.

        Raises GraphError when the tape has already been swept (call reset()
        or build a fresh Graph per step) or when `loss` is not 1x1x1x1.
        """
        if self._swept:
            raise GraphError("backward called twice on the same Graph without reset()")
        if loss.shape != (1, 1, 1, 1):
            raise GraphError(f"backward needs a scalar (1,1,1,1) node, got {loss.shape}")
        self._swept = True
        loss.grad = np.ones((1, 1, 1, 1), dtype=loss.dtype)
        for out, fn in reversed(self._tape):
            if out.grad is None:
                continue
            fn(out.grad)


def _shift_adjoint_axis(g: np.ndarray, delta: int, axis: int) -> np.ndarray:
    """Adjoint of an edge-clamped integer shift along one axis."""
    if delta == 0:
        return g
    n = g.shape[axis]
    out = np.zeros_like(g)
    src = [slice(None)] * g.ndim
    dst = [slice(None)] * g.ndim
    d = abs(delta)
    if d >= n:
        # every output read the same border sample
        edge = n - 1 if delta > 0 else 0
        dst[axis] = slice(edge, edge + 1)
        out[tuple(dst)] = g.sum(axis=axis, keepdims=True)
        return out
    if delta > 0:
        # out[r] = in[r+d] for r < n-d, else in[n-1]
        dst[axis] = slice(d, n)
        src[axis] = slice(0, n - d)
        out[tuple(dst)] = g[tuple(src)]
        src[axis] = slice(n - d, n)
        dst[axis] = slice(n - 1, n)
        out[tuple(dst)] += g[tuple(src)].sum(axis=axis, keepdims=True)
    else:
        # out[r] = in[r-d] for r >= d, else in[0]
        dst[axis] = slice(0, n - d)
        src[axis] = slice(d, n)
        out[tuple(dst)] = g[tuple(src)]
        src[axis] = slice(0, d)
        dst[axis] = slice(0, 1)
        out[tuple(dst)] += g[tuple(src)].sum(axis=axis, keepdims=True)
    return out


def _same_shape(x, y, opname: str):
    if x.shape != y.shape:
        raise ShapeError(f"{opname}: operand shapes differ, {x.shape} vs {y.shape}")


def backward(loss: Tensor4, graph: Graph):
    """Free-function spelling of Graph.backward."""
    graph.backward(loss)
