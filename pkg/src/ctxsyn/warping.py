"""Flow-validity checking and time-parameterized forward warping (splatting).

Every valid source pixel pushes its image and context values to the four
pixels enclosing its flow-displaced position, with bilinear weights.
Contributions accumulate in float64 in source-index order (np.bincount is a
sequential in-order reduction), then channels are normalized by total weight.
The result is therefore independent of pixel visitation order and of the
worker-thread count: threads only split independent channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .codecs import FlowField, Frame
from .context import ContextMap
from .threads import map_ordered

HOLE_EPS = 1e-4  # accumulated weight below this marks a hole
DEFAULT_TAU = 0.1  # brightness-constancy tolerance on the [0, 1] scale

ValidityMask = np.ndarray  # (H, W) bool, True where the flow vector is trusted


@dataclass
class WarpBundle:
    """A frame and its context map splatted to temporal position t.

    Hole pixels (weight < HOLE_EPS) carry exactly zero in every channel;
    elsewhere channels are the weighted mean of their contributions.
    """

    image: np.ndarray             # (3, H, W) float32, zeros at holes
    context: Optional[np.ndarray]  # (64, H, W) float32 or None
    weight: np.ndarray            # (H, W) float64 accumulated splat weight
    t: float

    def holes(self) -> np.ndarray:
        return self.weight < HOLE_EPS


def bilinear_sample(planes: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) planes at real coordinates; caller keeps them in bounds."""
    h, w = planes.shape[-2:]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x0 = np.clip(x0, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    p = planes.astype(np.float64)
    return (p[:, y0, x0] * (1 - fy) * (1 - fx) + p[:, y0, x1] * (1 - fy) * fx
            + p[:, y1, x0] * fy * (1 - fx) + p[:, y1, x1] * fy * fx)


def check_brightness_constancy(a: Frame, b: Frame, flow: FlowField,
                               tau: float = DEFAULT_TAU) -> ValidityMask:
    """Trust a flow vector iff it is finite, lands inside ``b`` and the mean
    RGB residual |a(x) - b(x + f(x))| stays within tau."""
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"frame dimensions differ: {a.width}x{a.height} vs "
                         f"{b.width}x{b.height}")
    if (flow.width, flow.height) != (a.width, a.height):
        raise ValueError(f"flow {flow.width}x{flow.height} does not match frame "
                         f"{a.width}x{a.height}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    h, w = a.height, a.width
    known = ~flow.unknown_mask()
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + flow.u.astype(np.float64)
    ty = ys + flow.v.astype(np.float64)
    with np.errstate(invalid="ignore"):
        inside = known & (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    sampled = bilinear_sample(b.rgb, np.where(inside, tx, 0), np.where(inside, ty, 0))
    residual = np.abs(a.rgb.astype(np.float64) - sampled).mean(axis=0)
    return inside & (residual <= tau)


@dataclass
class SplatPlan:
    """Precomputed splat geometry for one (flow, scale, validity) triple.

    The plan is a fixed linear map from source to target pixels, so it can be
    reused across channels and across training iterations, and it powers both
    the plain numpy path and the differentiable path.
    """

    height: int
    width: int
    tgt: np.ndarray     # (H*W, 4) int64 flattened target index per corner
    w: np.ndarray       # (H*W, 4) float64 bilinear weight per corner
    weight: np.ndarray  # (H, W) float64 accumulated total weight
    inv: np.ndarray     # (H*W,) float64, 1/weight where >= HOLE_EPS else 0


def make_splat_plan(flow: FlowField, scale: float,
                    valid: ValidityMask) -> SplatPlan:
    if not np.isfinite(scale):
        raise ValueError(f"flow scale must be finite, got {scale}")
    h, w = flow.height, flow.width
    if valid.shape != (h, w):
        raise ValueError(f"validity mask {valid.shape} does not match flow "
                         f"{h}x{w}")
    ys, xs = np.mgrid[0:h, 0:w]
    ok = valid.ravel()
    u = np.where(ok, flow.u.ravel().astype(np.float64), 0.0)
    v = np.where(ok, flow.v.ravel().astype(np.float64), 0.0)
    tx = xs.ravel() + scale * u
    ty = ys.ravel() + scale * v

    x0 = np.floor(tx).astype(np.int64)
    y0 = np.floor(ty).astype(np.int64)
    fx = tx - x0
    fy = ty - y0
    cx = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)         # (HW, 4)
    cy = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    cw = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx,
                   fy * (1 - fx), fy * fx], axis=1)
    inside = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    cw = np.where(inside & ok[:, None], cw, 0.0)
    tgt = np.where(inside, cy * w + cx, 0)

    weight = np.bincount(tgt.ravel(), weights=cw.ravel(),
                         minlength=h * w).reshape(h, w)
    solid = weight.ravel() >= HOLE_EPS
    inv = np.where(solid, 1.0 / np.where(solid, weight.ravel(), 1.0), 0.0)
    return SplatPlan(h, w, tgt, cw, weight, inv)


def splat_channels(plan: SplatPlan, values: np.ndarray,
                   out_dtype=np.float32) -> np.ndarray:
    """Splat (C, H, W) values through the plan; zeros at holes.

    Accumulation happens in float64 regardless of the output dtype.
    """
    hw = plan.height * plan.width
    flat_tgt = plan.tgt.ravel()

    def one(channel: np.ndarray) -> np.ndarray:
        contrib = plan.w * channel.ravel().astype(np.float64)[:, None]
        acc = np.bincount(flat_tgt, weights=contrib.ravel(), minlength=hw)
        return (acc * plan.inv).astype(out_dtype)

    if values.nbytes < (1 << 23):  # pool overhead beats tiny channels
        out = [one(ch) for ch in values]
    else:
        out = map_ordered(one, list(values))
    return np.stack(out).reshape(values.shape[0], plan.height, plan.width)


def splat_tensor(plan: SplatPlan, x: T.Tensor) -> T.Tensor:
    """Differentiable splat of a (N, C, H, W) tensor through a fixed plan.

    The plan is constant (no gradient w.r.t. flow); the map is linear in the
    channel values, so backward is a plain gather against the same weights.
    """
    n, c, h, w = x.shape
    if (h, w) != (plan.height, plan.width):
        raise T.ShapeError(f"tensor {h}x{w} does not match plan "
                           f"{plan.height}x{plan.width}")
    data = splat_channels(plan, x.data.reshape(n * c, h, w),
                          out_dtype=x.dtype).reshape(x.shape)

    def bwd(g):
        gf = g.reshape(n * c, h * w)

        def one(row: np.ndarray) -> np.ndarray:
            scaled = (row.astype(np.float64) * plan.inv)[plan.tgt]  # (HW, 4)
            return (scaled * plan.w).sum(axis=1)

        if g.nbytes < (1 << 23):
            rows = [one(row) for row in gf]
        else:
            rows = map_ordered(one, list(gf))
        x.accumulate_grad(np.stack(rows).reshape(x.shape).astype(g.dtype))

    return T._make(data, (x,), bwd)


def forward_warp(image: Frame, context: Optional[ContextMap], flow: FlowField,
                 t: float, valid: ValidityMask, *,
                 flow_scale: Optional[float] = None) -> WarpBundle:
    """Splat a frame (and its context) to temporal position t.

    The displacement applied is ``flow_scale * flow`` (default ``t * flow``).
    """
    if not np.isfinite(t):
        raise ValueError(f"temporal position must be finite, got {t}")
    if (flow.width, flow.height) != (image.width, image.height):
        raise ValueError(f"flow {flow.width}x{flow.height} does not match frame "
                         f"{image.width}x{image.height}")
    scale = t if flow_scale is None else flow_scale
    plan = make_splat_plan(flow, scale, valid)
    warped_image = splat_channels(plan, image.rgb)
    warped_context = None
    if context is not None:
        if (context.width, context.height) != (image.width, image.height):
            raise ValueError("context dimensions do not match frame")
        warped_context = splat_channels(plan, context.features)
    return WarpBundle(warped_image, warped_context, plan.weight, float(t))


def scale_flow(flow: FlowField, scale: float) -> FlowField:
    return FlowField(flow.width, flow.height,
                     (flow.u * np.float32(scale)).astype(np.float32),
                     (flow.v * np.float32(scale)).astype(np.float32))


def prewarp_pair(i1: Frame, i2: Frame, c1: Optional[ContextMap],
                 c2: Optional[ContextMap], f12: FlowField, f21: FlowField,
                 t: float, tau: float = DEFAULT_TAU
                 ) -> Tuple[WarpBundle, WarpBundle]:
    """Warp both frames toward time t: i1 by t * f12, i2 by (1 - t) * f21.

    Validity is measured with the full (unscaled) flow, so a vector that is
    wrong at t = 1 is distrusted at every t.
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"temporal position must lie in [0, 1], got {t}")
    valid1 = check_brightness_constancy(i1, i2, f12, tau)
    valid2 = check_brightness_constancy(i2, i1, f21, tau)
    b1 = forward_warp(i1, c1, f12, t, valid1, flow_scale=t)
    b2 = forward_warp(i2, c2, f21, t, valid2, flow_scale=1.0 - t)
    return b1, b2


def blend_baseline(b1: WarpBundle, b2: WarpBundle, t: float) -> Frame:
    """Pixel-wise blending reference: (1-t)*b1 + t*b2 where both bundles are
    solid, the surviving bundle where one is a hole, zero where both are."""
    if b1.image.shape != b2.image.shape:
        raise ValueError(f"bundle shapes differ: {b1.image.shape} vs "
                         f"{b2.image.shape}")
    h1 = b1.holes()
    h2 = b2.holes()
    blended = ((1.0 - t) * b1.image.astype(np.float64)
               + t * b2.image.astype(np.float64))
    out = np.where(~h1 & ~h2, blended,
                   np.where(~h1, b1.image, np.where(~h2, b2.image, 0.0)))
    return Frame.from_array(out.astype(np.float32))
