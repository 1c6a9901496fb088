"""Fallback bidirectional flow estimation: coarse-to-fine block matching on
grayscale pyramids. Accuracy lives in imported .flo files; this exists so the
pipeline runs end to end without them, and to score motion during dataset
selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codecs import FlowField, Frame


@dataclass
class PyramidConfig:
    levels: int = 5       # pyramid depth; coarsest level halved levels-1 times
    block: int = 3        # patch radius for the SSD window
    search: int = 4       # per-level search radius in pixels


def fit_levels(height: int, width: int, cfg: PyramidConfig) -> PyramidConfig:
    """Clamp the pyramid depth so the coarsest level stays at least 8 px."""
    levels = cfg.levels
    while levels > 1 and min(height, width) < (1 << (levels - 1)) * 8:
        levels -= 1
    if levels == cfg.levels:
        return cfg
    return PyramidConfig(levels=levels, block=cfg.block, search=cfg.search)


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[:h - h % 2, :w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2]
                   + img[1::2, 0::2] + img[1::2, 1::2])


def _box_sum(img: np.ndarray, radius: int) -> np.ndarray:
    """Sum over a (2r+1)^2 window with edge-replicated borders."""
    padded = np.pad(img, radius, mode="edge")
    c = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    k = 2 * radius + 1
    return (c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k])


def _sample_shifted(img: np.ndarray, grid, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gather img[y + dy, x + dx] with coordinates clamped to the border."""
    h, w = img.shape
    ys, xs = grid
    yy = np.clip(ys + dy, 0, h - 1)
    xx = np.clip(xs + dx, 0, w - 1)
    return img[yy, xx]


def estimate_flow(a: Frame, b: Frame, cfg: PyramidConfig = PyramidConfig()) -> FlowField:
    """Integer-displacement flow from ``a`` to ``b``.

    Every level refines the doubled coarser flow by an SSD search over
    displacements within cfg.search. Ties prefer the smaller total
    displacement magnitude, then the lexicographically smaller (du, dv),
    which makes the result fully deterministic.
    """
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(f"frame dimensions differ: {a.width}x{a.height} vs "
                         f"{b.width}x{b.height}")
    if min(a.height, a.width) < (1 << (cfg.levels - 1)) * 8:
        raise ValueError(f"image {a.width}x{a.height} too small for "
                         f"{cfg.levels} pyramid levels")

    pyr_a = [a.luma().astype(np.float64)]
    pyr_b = [b.luma().astype(np.float64)]
    for _ in range(cfg.levels - 1):
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(cfg.levels - 1, -1, -1):
        ga, gb = pyr_a[level], pyr_b[level]
        if u.shape != ga.shape:
            u = 2.0 * u.repeat(2, axis=0).repeat(2, axis=1)
            v = 2.0 * v.repeat(2, axis=0).repeat(2, axis=1)
            u = np.pad(u, ((0, ga.shape[0] - u.shape[0]),
                           (0, ga.shape[1] - u.shape[1])), mode="edge")
            v = np.pad(v, ((0, ga.shape[0] - v.shape[0]),
                           (0, ga.shape[1] - v.shape[1])), mode="edge")
        base_u = np.rint(u).astype(np.int64)
        base_v = np.rint(v).astype(np.int64)
        grid = np.mgrid[0:ga.shape[0], 0:ga.shape[1]]

        best_ssd = np.full(ga.shape, np.inf)
        best_mag = np.full(ga.shape, np.inf)
        best_u = np.zeros(ga.shape, dtype=np.int64)
        best_v = np.zeros(ga.shape, dtype=np.int64)
        for du in range(-cfg.search, cfg.search + 1):
            for dv in range(-cfg.search, cfg.search + 1):
                cu = base_u + du
                cv = base_v + dv
                diff = ga - _sample_shifted(gb, grid, cu, cv)
                ssd = _box_sum(diff * diff, cfg.block)
                mag = cu.astype(np.float64) ** 2 + cv.astype(np.float64) ** 2
                better = (ssd < best_ssd) | ((ssd == best_ssd) & (mag < best_mag))
                best_ssd = np.where(better, ssd, best_ssd)
                best_mag = np.where(better, mag, best_mag)
                best_u = np.where(better, cu, best_u)
                best_v = np.where(better, cv, best_v)
        u = best_u.astype(np.float64)
        v = best_v.astype(np.float64)

    return FlowField(a.width, a.height, u.astype(np.float32), v.astype(np.float32))


def mean_flow_magnitude(flow: FlowField) -> float:
    """Mean per-pixel displacement magnitude, ignoring unknown sentinels."""
    known = ~flow.unknown_mask()
    if not known.any():
        raise ValueError("flow field has no known vectors")
    u = flow.u[known].astype(np.float64)
    v = flow.v[known].astype(np.float64)
    return float(np.sqrt(u * u + v * v).mean())
