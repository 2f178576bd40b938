"""Differentiable backward warping of images, score maps, and flow fields.

Warp convention (important, since it flips sign semantics):
    flows are target-indexed displacements consumed by backward sampling,
        out(p) = bilinear_sample(source, p - flow(p)).
    A flow of (+2, 0) at pixel p therefore means "the content now at p came
    from 2 pixels to the left".  Backward sampling is hole-free and
    differentiable, which is why it is used both for the warp-last baseline
    and for the multi-step rollout.  Out-of-bounds samples clamp to the
    nearest edge pixel.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .fields import FlowField


def _sample_weights(u: np.ndarray, v: np.ndarray, height: int, width: int):
    """Bilinear corner indices/weights for sampling at (x-u, y-v), edge-clamped.

    Also returns per-pixel masks saying whether the *unclamped* coordinate
    was inside the image; gradients w.r.t. the flow are zero where clamping
    is active (the clamp is locally constant there).
    """
    ys, xs = np.meshgrid(
        np.arange(height, dtype=u.dtype), np.arange(width, dtype=u.dtype), indexing="ij"
    )
    sx = xs - u
    sy = ys - v
    in_x = (sx >= 0) & (sx <= width - 1)
    in_y = (sy >= 0) & (sy <= height - 1)
    cx = np.clip(sx, 0, width - 1)
    cy = np.clip(sy, 0, height - 1)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    fx = cx - x0
    fy = cy - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    return (y0, x0, y1, x1), (fy, fx), (in_y, in_x)


def _gather(src: np.ndarray, idx, frac):
    y0, x0, y1, x1 = idx
    fy, fx = frac
    s00 = src[..., y0, x0]
    s01 = src[..., y0, x1]
    s10 = src[..., y1, x0]
    s11 = src[..., y1, x1]
    top = (1.0 - fx) * s00 + fx * s01
    bot = (1.0 - fx) * s10 + fx * s11
    return (1.0 - fy) * top + fy * bot, (s00, s01, s10, s11)


def _warp_arrays(src: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Plain-numpy forward path for [C,H,W] sources (no graph)."""
    idx, frac, _ = _sample_weights(u, v, src.shape[-2], src.shape[-1])
    out, _ = _gather(src, idx, frac)
    return out.astype(src.dtype, copy=False)


def _scatter_add(buf: np.ndarray, ys: np.ndarray, xs: np.ndarray, vals: np.ndarray):
    """buf[..., ys, xs] += vals with duplicate indices, deterministically."""
    lead = int(np.prod(buf.shape[:-2])) if buf.ndim > 2 else 1
    hw = buf.shape[-2] * buf.shape[-1]
    flat_idx = (ys * buf.shape[-1] + xs).ravel()
    offsets = np.arange(lead) * hw
    full_idx = (offsets[:, None] + flat_idx[None, :]).ravel()
    acc = np.bincount(full_idx, weights=vals.reshape(lead, -1).ravel(), minlength=lead * hw)
    buf += acc.reshape(buf.shape).astype(buf.dtype, copy=False)


def backward_warp(source, flow) -> Tensor:
    """Warp ``source`` [C,H,W] (or [N,C,H,W]) by ``flow``; differentiable in both.

    ``flow`` may be a :class:`FlowField` (constant) or a Tensor shaped
    [2,H,W] / [N,2,H,W] whose channels are (u, v); per-sample flows pair
    with per-sample sources in the batched form.
    """
    src = source if isinstance(source, Tensor) else Tensor(np.asarray(source, np.float32))
    if isinstance(flow, FlowField):
        flw = Tensor(flow.as_array().astype(src.data.dtype))
    elif isinstance(flow, Tensor):
        flw = flow
    else:
        flw = Tensor(np.asarray(flow, src.data.dtype))

    batched = src.data.ndim == 4
    if src.data.ndim not in (3, 4):
        raise DimensionError(f"backward_warp: source must be [C,H,W] or [N,C,H,W], got {src.data.shape}")
    if flw.data.ndim != src.data.ndim or flw.data.shape[-3] != 2:
        raise DimensionError(
            f"backward_warp: flow shape {flw.data.shape} does not pair with source {src.data.shape}"
        )
    if flw.data.shape[-2:] != src.data.shape[-2:] or (
        batched and flw.data.shape[0] != src.data.shape[0]
    ):
        raise DimensionError(
            f"backward_warp: flow {flw.data.shape} vs source {src.data.shape}"
        )

    height, width = src.data.shape[-2:]
    if not batched:
        idx, frac, inside = _sample_weights(flw.data[0], flw.data[1], height, width)
        out, corners = _gather(src.data, idx, frac)
        plan = [(idx, frac, inside, corners, src.data, (slice(None),))]
        data = out.astype(src.data.dtype, copy=False)
    else:
        outs = []
        plan = []
        for i in range(src.data.shape[0]):
            idx, frac, inside = _sample_weights(flw.data[i, 0], flw.data[i, 1], height, width)
            out, corners = _gather(src.data[i], idx, frac)
            outs.append(out)
            plan.append((idx, frac, inside, corners, src.data[i], (i, slice(None))))
        data = np.stack(outs).astype(src.data.dtype, copy=False)

    def backward(g):
        gsrc = np.zeros_like(src.data) if src.requires_grad else None
        gflw = np.zeros_like(flw.data) if flw.requires_grad else None
        for (idx, frac, inside, corners, sdata, sel) in plan:
            y0, x0, y1, x1 = idx
            fy, fx = frac
            gi = g[sel]
            if gsrc is not None:
                tgt = gsrc[sel]
                _scatter_add(tgt, y0, x0, gi * (1 - fy) * (1 - fx))
                _scatter_add(tgt, y0, x1, gi * (1 - fy) * fx)
                _scatter_add(tgt, y1, x0, gi * fy * (1 - fx))
                _scatter_add(tgt, y1, x1, gi * fy * fx)
            if gflw is not None:
                s00, s01, s10, s11 = corners
                in_y, in_x = inside
                # d out / d sample-x, summed over channels against g
                dx = (1 - fy) * (s01 - s00) + fy * (s11 - s10)
                dy = (1 - fx) * (s10 - s00) + fx * (s11 - s01)
                axes = tuple(range(gi.ndim - 2))
                gx = (gi * dx).sum(axis=axes)
                gy = (gi * dy).sum(axis=axes)
                # sample position is p - flow, so d/d(flow) = -d/d(sample);
                # clamped samples see zero gradient
                if sel[0] == slice(None):
                    gflw[0] += -gx * in_x
                    gflw[1] += -gy * in_y
                else:
                    gflw[sel[0], 0] += -gx * in_x
                    gflw[sel[0], 1] += -gy * in_y
        if gsrc is not None:
            src._accumulate(gsrc)
        if gflw is not None:
            flw._accumulate(gflw)

    return ad._make(data, (src, flw), backward)


def warp_scores(scores: np.ndarray, flow: FlowField) -> np.ndarray:
    """Warp a [C,H,W] score map by a flow (plain arrays, no graph)."""
    if scores.shape[-2:] != flow.shape:
        raise DimensionError(f"scores {scores.shape} vs flow {flow.shape}")
    return _warp_arrays(np.asarray(scores, np.float32), flow.u, flow.v)


def warp_image(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Warp a [C,H,W] image by a flow (plain arrays, no graph)."""
    return warp_scores(image, flow)


def warp_flow(flow_prev: FlowField, carrier: FlowField) -> FlowField:
    """Warp a flow field by another flow, treating (u,v) as a 2-channel image."""
    if flow_prev.shape != carrier.shape:
        raise DimensionError(f"flow {flow_prev.shape} vs carrier {carrier.shape}")
    warped = _warp_arrays(flow_prev.as_array(), carrier.u, carrier.v)
    return FlowField(warped[0], warped[1])
