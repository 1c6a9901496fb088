"""Synthetic scenes with exact ground-truth flow, shared by the test suite.

A scene is a textured background with a textured square translating across
it at constant velocity. The triplet frames sample the motion at t = 0,
0.5, 1; the exact flow fields carry the square's displacement inside the
square and the background's displacement elsewhere. Covered/uncovered
background gives real occlusion structure: holes, mixed splats, and regions
that only one bundle can see.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from ctxsyn.codecs import FlowField, Frame
from ctxsyn.evaluation import EvalExample
from ctxsyn.training import Triplet


def smooth_texture(rng: np.random.Generator, h: int, w: int,
                   coarse: int = 8, grain: float = 0.035,
                   lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    """Band-limited random RGB texture in [lo, hi], shape (3, h, w)."""
    base = rng.random((3, coarse, coarse))
    reps = (h + coarse - 1) // coarse, (w + coarse - 1) // coarse
    up = base.repeat(reps[0], axis=1).repeat(reps[1], axis=2)[:, :h, :w]
    # cheap separable blur to avoid blocky edges
    for axis in (1, 2):
        up = (np.roll(up, 1, axis) + 2 * up + np.roll(up, -1, axis)) / 4.0
    tex = up + grain * rng.standard_normal((3, h, w))
    span = hi - lo
    tex = lo + span * (tex - tex.min()) / max(tex.max() - tex.min(), 1e-9)
    return tex.astype(np.float32)


def _paste_square(canvas: np.ndarray, patch: np.ndarray, y: int, x: int) -> None:
    s = patch.shape[1]
    h, w = canvas.shape[1:]
    y0, y1 = max(y, 0), min(y + s, h)
    x0, x1 = max(x, 0), min(x + s, w)
    if y0 < y1 and x0 < x1:
        canvas[:, y0:y1, x0:x1] = patch[:, y0 - y:y1 - y, x0 - x:x1 - x]


def square_scene(rng: np.random.Generator, size: int = 64,
                 square: int = 20, vel: Tuple[int, int] = (8, 4),
                 bright: bool = False) -> Triplet:
    """Triplet of a square translating by ``vel`` (must be even) over a
    static background, with exact bidirectional first<->last flow."""
    dx, dy = vel
    if dx % 2 or dy % 2:
        raise ValueError(f"velocity must be even for exact midpoints, got {vel}")
    bg = smooth_texture(rng, size, size)
    if bright:
        patch = smooth_texture(rng, square, square, coarse=4, lo=0.75, hi=1.0)
        bg *= 0.35  # dark background so the object is trackable by luma
    else:
        patch = smooth_texture(rng, square, square, coarse=4)
    margin = 2
    y0 = int(rng.integers(margin, size - square - abs(dy) - margin + 1))
    x0 = int(rng.integers(margin, size - square - abs(dx) - margin + 1))
    if dy < 0:
        y0 -= dy
    if dx < 0:
        x0 -= dx

    frames = []
    positions = [(y0, x0), (y0 + dy // 2, x0 + dx // 2), (y0 + dy, x0 + dx)]
    for py, px in positions:
        canvas = bg.copy()
        _paste_square(canvas, patch, py, px)
        frames.append(Frame.from_array(canvas))

    fwd_u = np.zeros((size, size), dtype=np.float32)
    fwd_v = np.zeros((size, size), dtype=np.float32)
    fwd_u[y0:y0 + square, x0:x0 + square] = dx
    fwd_v[y0:y0 + square, x0:x0 + square] = dy
    bwd_u = np.zeros((size, size), dtype=np.float32)
    bwd_v = np.zeros((size, size), dtype=np.float32)
    y1p, x1p = positions[2]
    bwd_u[y1p:y1p + square, x1p:x1p + square] = -dx
    bwd_v[y1p:y1p + square, x1p:x1p + square] = -dy

    return Triplet(frames[0], frames[1], frames[2],
                   source_id=f"synth:{y0},{x0},{vel}",
                   flow_fwd=FlowField(size, size, fwd_u, fwd_v),
                   flow_bwd=FlowField(size, size, bwd_u, bwd_v))


_VELOCITIES = [(6, 2), (4, -4), (-8, 2), (2, 6), (-4, -4), (8, 0),
               (0, 6), (-6, 4)]


def toy_dataset(seed: int, count: int, size: int = 64) -> List[Triplet]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        vel = _VELOCITIES[i % len(_VELOCITIES)]
        square = int(rng.integers(14, 25))
        out.append(square_scene(rng, size=size, square=square, vel=vel))
    return out


def occlusion_suite(seed: int, count: int, size: int = 64) -> List[EvalExample]:
    """Held-out triplets as evaluation examples (middle frame = truth)."""
    examples = []
    for i, trip in enumerate(toy_dataset(seed, count, size=size)):
        examples.append(EvalExample(f"occ{i:03d}", trip.first, trip.last,
                                    trip.middle, trip.flow_fwd, trip.flow_bwd))
    return examples


def luma_centroid(frame: Frame, threshold: float = 0.5) -> Tuple[float, float]:
    """(y, x) centroid of bright pixels; tracks the bright square."""
    luma = frame.luma().astype(np.float64)
    mask = np.clip(luma - threshold, 0.0, None)
    total = mask.sum()
    if total <= 0:
        raise ValueError("no bright object to track")
    ys, xs = np.mgrid[0:luma.shape[0], 0:luma.shape[1]]
    return float((ys * mask).sum() / total), float((xs * mask).sum() / total)
