"""Neural-network layers over the autodiff tensor type.

Feature maps are (C, H, W); convolution is cross-correlation (no kernel
flip) with stride, zero padding and dilation. The stride-1 path runs as
a shift-and-GEMM: the padded map is kept channels-last and flattened so
every kernel tap is a contiguous matrix view, accumulated in place with
one BLAS call per tap. Tap order is fixed (row-major over the kernel),
so a dilated kernel and its zero-inserted dense equivalent produce
bit-identical sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import blas as _blas

from .boxes import RoiBox
from .tensor import (Tensor, accumulate_grad, alloc, make_op)


class ShapeError(ValueError):
    pass


def _gemm_acc(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
    """c += a @ b for C-contiguous 2-D arrays, in place, no copies."""
    if a.dtype == np.float32:
        _blas.sgemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=1)
    else:
        _blas.dgemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=1)


# ---------------------------------------------------------------------------
# Parameter records
# ---------------------------------------------------------------------------

@dataclass
class Conv2dParams:
    """2-D convolution filters: kernel (C_out, C_in, kh, kw), bias (C_out)."""
    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel.data.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-D, got {self.kernel.shape}")
        if self.bias.data.shape != (self.kernel.data.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match "
                f"{self.kernel.data.shape[0]} output channels")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride/dilation must be >= 1, padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.kernel.data.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.data.shape[1]


@dataclass
class DepthwiseSeparableParams:
    """Depthwise stage (C, 1, kh, kw) + pointwise stage (C_out, C, 1, 1)."""
    depthwise: Tensor
    depthwise_bias: Tensor
    pointwise: Tensor
    pointwise_bias: Tensor
    padding: int = 0

    def __post_init__(self):
        c = self.depthwise.data.shape[0]
        if self.depthwise.data.shape[1] != 1:
            raise ShapeError("depthwise kernel must have a single input plane "
                             f"per channel, got {self.depthwise.shape}")
        if self.pointwise.data.shape[1] != c:
            raise ShapeError(
                f"pointwise stage expects {self.pointwise.data.shape[1]} "
                f"channels, depthwise stage produces {c}")
        if self.pointwise.data.shape[2:] != (1, 1):
            raise ShapeError("pointwise kernel must be 1x1")

    @property
    def channels(self) -> int:
        return self.depthwise.data.shape[0]

    @property
    def out_channels(self) -> int:
        return self.pointwise.data.shape[0]


@dataclass
class FcParams:
    """Affine map: weight (out_features, in_features), bias (out_features)."""
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.data.ndim != 2:
            raise ShapeError(f"fc weight must be 2-D, got {self.weight.shape}")
        if self.bias.data.shape != (self.weight.data.shape[0],):
            raise ShapeError(
                f"fc bias shape {self.bias.shape} does not match "
                f"{self.weight.data.shape[0]} output features")

    @property
    def in_features(self) -> int:
        return self.weight.data.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.data.shape[0]


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int,
                     dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlate a (C_in, H, W) map into (C_out, H', W')."""
    cin, h, w = x.data.shape
    cout, kcin, kh, kw = p.kernel.data.shape
    if cin != kcin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    ho = conv_output_size(h, kh, p.stride, p.padding, p.dilation)
    wo = conv_output_size(w, kw, p.stride, p.padding, p.dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {p.stride}, padding {p.padding}, dilation {p.dilation}")
    if p.stride == 1:
        return _conv2d_shift(x, p, ho, wo)
    return _conv2d_strided(x, p, ho, wo)


def _conv2d_shift(x: Tensor, p: Conv2dParams, ho: int, wo: int) -> Tensor:
    cin, h, w = x.data.shape
    cout, _, kh, kw = p.kernel.data.shape
    pad, dil = p.padding, p.dilation
    dt = x.data.dtype
    hp, wp = h + 2 * pad, w + 2 * pad
    tail = (kw - 1) * dil
    buf = alloc((hp * wp + tail, cin), dt, zero=True)
    buf[:hp * wp].reshape(hp, wp, cin)[pad:pad + h, pad:pad + w] = \
        x.data.transpose(1, 2, 0)
    L = ho * wp
    acc = alloc((L, cout), dt)
    acc[...] = p.bias.data.astype(dt)
    kern = p.kernel.data
    taps = [np.ascontiguousarray(kern[:, :, i, j].T.astype(dt, copy=False))
            for i in range(kh) for j in range(kw)]
    for idx, (i, j) in enumerate((i, j) for i in range(kh) for j in range(kw)):
        off = i * dil * wp + j * dil
        _gemm_acc(buf[off:off + L], taps[idx], acc)
    out = alloc((cout, ho, wo), dt)
    out[...] = acc.reshape(ho, wp, cout)[:, :wo].transpose(2, 0, 1)

    def bwd(g):
        gf = alloc((L, cout), dt, zero=True)
        gf.reshape(ho, wp, cout)[:, :wo] = g.transpose(1, 2, 0)
        if p.bias.requires_grad:
            accumulate_grad(p.bias, gf.sum(axis=0).astype(p.bias.dtype))
        if p.kernel.requires_grad:
            dk = np.empty_like(p.kernel.data)
            for i in range(kh):
                for j in range(kw):
                    off = i * dil * wp + j * dil
                    dk[:, :, i, j] = gf.T @ buf[off:off + L]
            accumulate_grad(p.kernel, dk)
        if x.requires_grad:
            dbuf = alloc(buf.shape, dt, zero=True)
            for i in range(kh):
                for j in range(kw):
                    off = i * dil * wp + j * dil
                    wt = np.ascontiguousarray(kern[:, :, i, j].astype(dt, copy=False))
                    _gemm_acc(gf, wt, dbuf[off:off + L])
            dpad = dbuf[:hp * wp].reshape(hp, wp, cin)
            accumulate_grad(
                x, dpad[pad:pad + h, pad:pad + w].transpose(2, 0, 1))

    return make_op(out, (x, p.kernel, p.bias), bwd)


def _conv2d_strided(x: Tensor, p: Conv2dParams, ho: int, wo: int) -> Tensor:
    # generic fallback; none of the stock architectures use strided convs
    cin, h, w = x.data.shape
    cout, _, kh, kw = p.kernel.data.shape
    pad, dil, s = p.padding, p.dilation, p.stride
    dt = x.data.dtype
    hp, wp = h + 2 * pad, w + 2 * pad
    xp = np.zeros((hp, wp, cin), dt)
    xp[pad:pad + h, pad:pad + w] = x.data.transpose(1, 2, 0)
    acc = np.empty((ho * wo, cout), dt)
    acc[...] = p.bias.data.astype(dt)
    slices = {}
    for i in range(kh):
        for j in range(kw):
            sl = np.ascontiguousarray(
                xp[i * dil:i * dil + (ho - 1) * s + 1:s,
                   j * dil:j * dil + (wo - 1) * s + 1:s].reshape(-1, cin))
            slices[i, j] = sl
            wt = np.ascontiguousarray(p.kernel.data[:, :, i, j].T.astype(dt, copy=False))
            _gemm_acc(sl, wt, acc)
    out = np.ascontiguousarray(acc.reshape(ho, wo, cout).transpose(2, 0, 1))

    def bwd(g):
        gf = np.ascontiguousarray(g.transpose(1, 2, 0).reshape(-1, cout))
        if p.bias.requires_grad:
            accumulate_grad(p.bias, gf.sum(axis=0).astype(p.bias.dtype))
        if p.kernel.requires_grad:
            dk = np.empty_like(p.kernel.data)
            for (i, j), sl in slices.items():
                dk[:, :, i, j] = gf.T @ sl
            accumulate_grad(p.kernel, dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    wt = p.kernel.data[:, :, i, j].astype(dt, copy=False)
                    dsl = (gf @ wt).reshape(ho, wo, cin)
                    dxp[i * dil:i * dil + (ho - 1) * s + 1:s,
                        j * dil:j * dil + (wo - 1) * s + 1:s] += dsl
            accumulate_grad(
                x, dxp[pad:pad + h, pad:pad + w].transpose(2, 0, 1))

    return make_op(out, (x, p.kernel, p.bias), bwd)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
                     padding: int = 0) -> Tensor:
    """Per-channel convolution: kernel (C, 1, kh, kw) over (C, H, W)."""
    cin, h, w = x.data.shape
    c, one, kh, kw = kernel.data.shape
    if c != cin or one != 1:
        raise ShapeError(
            f"depthwise kernel {kernel.data.shape} does not match "
            f"{cin} input channels")
    ho = conv_output_size(h, kh, 1, padding, 1)
    wo = conv_output_size(w, kw, 1, padding, 1)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"depthwise conv output would be empty: input {h}x{w}, "
            f"kernel {kh}x{kw}, padding {padding}")
    dt = x.data.dtype
    hp, wp = h + 2 * padding, w + 2 * padding
    tail = kw - 1
    buf = alloc((hp * wp + tail, cin), dt, zero=True)
    buf[:hp * wp].reshape(hp, wp, cin)[padding:padding + h,
                                       padding:padding + w] = \
        x.data.transpose(1, 2, 0)
    L = ho * wp
    acc = alloc((L, cin), dt)
    acc[...] = bias.data.astype(dt)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            acc += buf[off:off + L] * kernel.data[:, 0, i, j].astype(dt, copy=False)
    out = alloc((cin, ho, wo), dt)
    out[...] = acc.reshape(ho, wp, cin)[:, :wo].transpose(2, 0, 1)

    def bwd(g):
        gf = alloc((L, cin), dt, zero=True)
        gf.reshape(ho, wp, cin)[:, :wo] = g.transpose(1, 2, 0)
        if bias.requires_grad:
            accumulate_grad(bias, gf.sum(axis=0).astype(bias.dtype))
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    dk[:, 0, i, j] = np.einsum(
                        "lc,lc->c", buf[off:off + L], gf)
            accumulate_grad(kernel, dk)
        if x.requires_grad:
            dbuf = alloc(buf.shape, dt, zero=True)
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    dbuf[off:off + L] += gf * kernel.data[:, 0, i, j].astype(dt, copy=False)
            dpad = dbuf[:hp * wp].reshape(hp, wp, cin)
            accumulate_grad(
                x, dpad[padding:padding + h,
                        padding:padding + w].transpose(2, 0, 1))

    return make_op(out, (x, kernel, bias), bwd)


def depthwise_separable_conv(x: Tensor, p: DepthwiseSeparableParams) -> Tensor:
    """Depthwise stage followed by a 1x1 cross-channel stage.

    With a full-size depthwise kernel and no padding the spatial extent
    collapses to 1x1, which is how the channel gate folds a pooled
    region into one value per channel.
    """
    mid = depthwise_conv2d(x, p.depthwise, p.depthwise_bias, p.padding)
    point = Conv2dParams(kernel=p.pointwise, bias=p.pointwise_bias)
    return conv2d(mid, point)


# ---------------------------------------------------------------------------
# Fully connected
# ---------------------------------------------------------------------------

def linear(x: Tensor, p: FcParams) -> Tensor:
    """Batched affine map on (N, in_features) rows."""
    if x.data.ndim != 2 or x.data.shape[1] != p.in_features:
        raise ShapeError(
            f"linear expects (N, {p.in_features}), got {x.shape}")
    wt = p.weight.data.T
    out = x.data @ wt + p.bias.data

    def bwd(g):
        if p.bias.requires_grad:
            accumulate_grad(p.bias, g.sum(axis=0))
        if p.weight.requires_grad:
            accumulate_grad(p.weight, g.T @ x.data)
        if x.requires_grad:
            accumulate_grad(x, g @ p.weight.data)

    return make_op(out, (x, p.weight, p.bias), bwd)


def fully_connected(x: Tensor, p: FcParams) -> Tensor:
    """Affine map of a flattened input: weight @ flatten(x) + bias."""
    flat = x.data.reshape(-1)
    if flat.size != p.in_features:
        raise ShapeError(
            f"fully_connected expects {p.in_features} input values, "
            f"got {flat.size} (shape {x.shape})")
    out = p.weight.data @ flat + p.bias.data

    def bwd(g):
        if p.bias.requires_grad:
            accumulate_grad(p.bias, g)
        if p.weight.requires_grad:
            accumulate_grad(p.weight, np.outer(g, flat))
        if x.requires_grad:
            accumulate_grad(x, (g @ p.weight.data).reshape(x.shape))

    return make_op(out, (x, p.weight, p.bias), bwd)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    out = np.maximum(x.data, 0)

    def bwd(g):
        accumulate_grad(x, g * (x.data > 0))

    return make_op(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output stays strictly inside (0, 1)."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    info = np.finfo(d.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)

    def bwd(g):
        accumulate_grad(x, g * out * (1.0 - out))

    return make_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-window max; ties route the gradient to the first element in
    row-major scan order."""
    if stride is None:
        stride = window
    c, h, w = x.data.shape
    if window > h or window > w:
        raise ShapeError(
            f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    ridx = (np.arange(ho) * stride)[:, None] + np.arange(window)[None, :]
    cidx = (np.arange(wo) * stride)[:, None] + np.arange(window)[None, :]
    gathered = x.data[:, ridx[:, None, :, None], cidx[None, :, None, :]]
    flat = gathered.reshape(c, ho, wo, window * window)
    am = flat.argmax(axis=3)
    out = np.take_along_axis(flat, am[..., None], axis=3)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        if stride == window:
            # disjoint windows: the scatter is an inverse reshape
            scatter = np.zeros((c, ho, wo, window * window), x.data.dtype)
            np.put_along_axis(scatter, am[..., None], g[..., None], axis=3)
            dx[:, :ho * window, :wo * window] = (
                scatter.reshape(c, ho, wo, window, window)
                .transpose(0, 1, 3, 2, 4)
                .reshape(c, ho * window, wo * window))
        else:
            a, b = am // window, am % window
            rows = (np.arange(ho) * stride)[None, :, None] + a
            cols = (np.arange(wo) * stride)[None, None, :] + b
            chan = np.broadcast_to(np.arange(c)[:, None, None], am.shape)
            np.add.at(dx.reshape(c, -1),
                      (chan.reshape(c, -1), (rows * w + cols).reshape(c, -1)),
                      g.reshape(c, -1))
        accumulate_grad(x, dx)

    return make_op(out, (x,), bwd)


def roi_max_pool(feature: Tensor, roi: RoiBox, out_size: int,
                 spatial_scale: float) -> Tensor:
    """Classic RoI max pooling onto a (C, p, p) grid.

    The box is scaled into feature coordinates and snapped outward to
    integer cells (floor start / ceil end), then divided into a p x p
    integer bin grid over the snapped extent. Each bin is clamped to
    the map; a bin left empty by that clamping (the box hangs off the
    map edge) outputs 0 and carries no gradient. Snapping a valid box
    always spans at least one cell per axis; the one-cell clamp below
    is a guard for the degenerate zero-area case.
    """
    c, h, w = feature.data.shape
    p = int(out_size)
    x0 = int(np.floor(roi.x1 * spatial_scale))
    y0 = int(np.floor(roi.y1 * spatial_scale))
    x1 = int(np.ceil(roi.x2 * spatial_scale))
    y1 = int(np.ceil(roi.y2 * spatial_scale))
    if x0 >= w or x1 <= 0 or y0 >= h or y1 <= 0:
        raise ShapeError(
            f"roi {roi} lies entirely outside the {h}x{w} feature map "
            f"at scale {spatial_scale}")
    if x1 <= x0:
        x0 = min(max(x0, 0), w - 1)
        x1 = x0 + 1
    if y1 <= y0:
        y0 = min(max(y0, 0), h - 1)
        y1 = y0 + 1
    hh, ww = y1 - y0, x1 - x0

    def bin_edges(origin: int, extent: int, limit: int) -> tuple:
        i = np.arange(p)
        starts = np.clip(origin + (i * extent) // p, 0, limit)
        ends = np.clip(origin + -((-(i + 1) * extent) // p), 0, limit)
        return starts, ends

    rs, re = bin_edges(y0, hh, h)
    cs, ce = bin_edges(x0, ww, w)
    mbh = max(int((re - rs).max()), 1)
    mbw = max(int((ce - cs).max()), 1)
    rows = np.minimum(rs[:, None] + np.arange(mbh)[None, :], h - 1)
    cols = np.minimum(cs[:, None] + np.arange(mbw)[None, :], w - 1)
    vr = rs[:, None] + np.arange(mbh)[None, :] < re[:, None]
    vc = cs[:, None] + np.arange(mbw)[None, :] < ce[:, None]
    valid = vr[:, None, :, None] & vc[None, :, None, :]
    gathered = feature.data[:, rows[:, None, :, None], cols[None, :, None, :]]
    neg = np.array(-np.inf, feature.data.dtype)
    flat = np.where(valid, gathered, neg).reshape(c, p, p, mbh * mbw)
    am = flat.argmax(axis=3)
    mx = np.take_along_axis(flat, am[..., None], axis=3)[..., 0]
    empty = ~valid.reshape(p, p, -1).any(axis=2)
    out = np.where(empty[None, :, :], np.array(0, feature.data.dtype), mx)

    def bwd(g):
        if not feature.requires_grad:
            return
        dx = np.zeros_like(feature.data)
        a, b = am // mbw, am % mbw
        pi = np.broadcast_to(np.arange(p)[None, :, None], (c, p, p))
        pj = np.broadcast_to(np.arange(p)[None, None, :], (c, p, p))
        r = rows[pi, a]
        cc = cols[pj, b]
        keep = ~np.broadcast_to(empty[None], (c, p, p))
        chan = np.broadcast_to(np.arange(c)[:, None, None], (c, p, p))
        np.add.at(dx.reshape(c, -1), (chan[keep], (r * w + cc)[keep]), g[keep])
        accumulate_grad(feature, dx)

    return make_op(out, (feature,), bwd)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack (C_i, h, w) maps along channels in argument order."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    hw = inputs[0].data.shape[1:]
    for t in inputs[1:]:
        if t.data.shape[1:] != hw:
            raise ShapeError(
                f"concat_channels spatial mismatch: {hw} vs {t.data.shape[1:]}")
    out = np.concatenate([t.data for t in inputs], axis=0)
    sizes = [t.data.shape[0] for t in inputs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, a, b in zip(inputs, offsets[:-1], offsets[1:]):
            accumulate_grad(t, g[a:b])

    return make_op(out, inputs, bwd)
