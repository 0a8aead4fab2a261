"""Differentiable inverse warping and flow-field resampling.

A flow field is a (N, 2, H, W) tensor in full-resolution pixel units:
channel 0 is u (horizontal, +x right), channel 1 is v (vertical, +y down).
`warp_image` reads the target at (x + u, y + v) with bilinear interpolation.

Border policy: sampling coordinates are clamped to the image rectangle so
values and gradients stay finite; pixels whose pre-clamp source fell outside
[0, W-1] x [0, H-1] are reported in a validity mask and are expected to be
excluded from losses. At exactly-integer coordinates the left/upper cell's
interpolation weights are used, which makes the flow gradient one-sided but
deterministic.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Graph, Tensor4


def _bilinear_gather(data: np.ndarray, gy: np.ndarray, gx: np.ndarray):
    """Gather data (N,C,H,W) at clamped real coords gy/gx (N,H,W).

    Returns (warped, corners, weights) where corners/weights let the caller
    assemble gradients without re-gathering.
    """
    n, c, h, w = data.shape
    cy = np.clip(gy, 0.0, h - 1.0)
    cx = np.clip(gx, 0.0, w - 1.0)
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (cy - y0).astype(data.dtype)
    wx = (cx - x0).astype(data.dtype)

    flat = data.reshape(n, c, h * w)
    bidx = np.arange(n)[:, None, None]
    cidx = np.arange(c)[None, :, None]

    def take(yy, xx):
        lin = (yy * w + xx).reshape(n, 1, h * w)
        return flat[bidx, cidx, lin]  # (N, C, H*W)

    p00 = take(y0, x0)
    p01 = take(y0, x1)
    p10 = take(y1, x0)
    p11 = take(y1, x1)
    wyf = wy.reshape(n, 1, h * w)
    wxf = wx.reshape(n, 1, h * w)
    top = p00 + (p01 - p00) * wxf
    bot = p10 + (p11 - p10) * wxf
    out = (top + (bot - top) * wyf).reshape(n, c, h, w)
    corners = (y0, x0, y1, x1)
    weights = (wyf, wxf)
    samples = (p00, p01, p10, p11)
    return out, corners, weights, samples


def _warp_core(g: Graph, target: Tensor4, flow: Tensor4):
    n, c, h, w = target.shape
    fn, fc, fh, fw = flow.shape
    if fc != 2 or (fn, fh, fw) != (n, h, w):
        raise ShapeError(
            f"warp: target {target.shape} needs flow (N,2,H,W) with matching dims, got {flow.shape}"
        )
    yy, xx = np.meshgrid(
        np.arange(h, dtype=target.dtype), np.arange(w, dtype=target.dtype), indexing="ij"
    )
    gx = xx[None] + flow.data[:, 0]
    gy = yy[None] + flow.data[:, 1]
    in_x = (gx >= 0.0) & (gx <= w - 1.0)
    in_y = (gy >= 0.0) & (gy <= h - 1.0)
    valid = (in_x & in_y).astype(target.dtype)[:, None]

    out, corners, weights, samples = _bilinear_gather(target.data, gy, gx)
    y0, x0, y1, x1 = corners
    wyf, wxf = weights
    p00, p01, p10, p11 = samples

    def backward(gout: np.ndarray):
        gflat = gout.reshape(n, c, h * w)
        if flow.requires_grad:
            # d out / d gx = (1-wy)*(p01-p00) + wy*(p11-p10); summed over channels
            dgx = ((1.0 - wyf) * (p01 - p00) + wyf * (p11 - p10)) * gflat
            dgy = ((1.0 - wxf) * (p10 - p00) + wxf * (p11 - p01)) * gflat
            du = dgx.sum(axis=1).reshape(n, h, w) * in_x.astype(gout.dtype)
            dv = dgy.sum(axis=1).reshape(n, h, w) * in_y.astype(gout.dtype)
            flow.accumulate_grad(np.stack([du, dv], axis=1), own=True)
        if target.requires_grad:
            gt = np.zeros((n, c, h * w), dtype=gout.dtype)
            bidx = np.arange(n)[:, None, None]
            cidx = np.arange(c)[None, :, None]
            for yy_, xx_, wgt in (
                (y0, x0, (1 - wyf) * (1 - wxf)),
                (y0, x1, (1 - wyf) * wxf),
                (y1, x0, wyf * (1 - wxf)),
                (y1, x1, wyf * wxf),
            ):
                lin = (yy_ * w + xx_).reshape(n, 1, h * w)
                np.add.at(gt, (bidx, cidx, lin), gflat * wgt)
            target.accumulate_grad(gt.reshape(n, c, h, w), own=True)

    warped = g._emit(out, (target, flow), backward)
    return warped, Tensor4(valid)


def warp_image(g: Graph, target: Tensor4, flow: Tensor4):
    """Inverse-warp `target` by `flow`: out(p) = target(p + flow(p)).

    Returns (warped, valid); valid is 1 where the source lay inside the
    image before clamping. Differentiable with respect to both arguments.
    """
    return _warp_core(g, target, flow)


def sample_flow_at_flow(g: Graph, backward_flow: Tensor4, forward_flow: Tensor4):
    """Resample a backward flow at forward-displaced positions.

    out(p) = backward_flow(p + forward_flow(p)): the quantity a
    forward-backward consistency check compares against -forward_flow(p).
    """
    return _warp_core(g, backward_flow, forward_flow)
