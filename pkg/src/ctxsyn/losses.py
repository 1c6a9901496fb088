"""Training objectives: l1 color loss, Laplacian-pyramid loss, and a
pluggable feature loss. All reductions are sums; the learning rate absorbs
the scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import tensor as T
from .codecs import CodecError, TensorContainer

PYRAMID_LEVELS = 5

# FeatureExtractor: any deterministic differentiable map from image tensors
# to feature tensors. The context extractor's forward qualifies, as does a
# conv stack loaded from "feat.*" container entries.
FeatureExtractor = Callable[[T.Tensor], T.Tensor]


def l1_loss(pred: T.Tensor, target: T.Tensor) -> T.Tensor:
    """Sum of absolute differences; subgradient 0 at exact ties."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return T.tensor_sum(T.absolute(pred - target))


_kernel_cache: dict = {}


def _binomial_kernel(channels: int, dtype) -> T.Tensor:
    """5x5 binomial blur as a per-channel (diagonal) convolution weight."""
    key = (channels, np.dtype(dtype).name)
    if key not in _kernel_cache:
        k1 = np.array([1, 4, 6, 4, 1], dtype=np.float64)
        k2 = np.outer(k1, k1) / 256.0
        weight = np.zeros((channels, channels, 5, 5), dtype=dtype)
        for c in range(channels):
            weight[c, c] = k2
        _kernel_cache[key] = T.Tensor(weight)
    return _kernel_cache[key]


@dataclass
class LaplacianPyramid:
    """Band-pass levels plus the retained low-frequency residual."""

    levels: List[T.Tensor]   # levels[i] at scale 1/2^i, finest first
    low_residual: T.Tensor

    def reconstruct(self) -> T.Tensor:
        out = self.low_residual
        for level in reversed(self.levels):
            out = level + T.bilinear_resize(out, 2)
        return out


def build_laplacian(img: T.Tensor, levels: int = PYRAMID_LEVELS) -> LaplacianPyramid:
    """Gaussian pyramid via 5x5 binomial blur (reflection padding) and
    factor-2 decimation; band i is G_i minus the upsampled G_{i+1}."""
    if img.ndim != 4:
        raise T.ShapeError(f"expected NCHW tensor, got shape {img.shape}")
    div = 1 << levels
    if img.shape[2] % div or img.shape[3] % div:
        raise T.ShapeError(f"spatial dims must be divisible by {div} for "
                           f"{levels} levels, got {img.shape[2]}x{img.shape[3]}")
    if min(img.shape[2], img.shape[3]) < 2 * div:
        # the coarsest blur still needs room for its 2-px reflection pad
        raise T.ShapeError(f"spatial dims must be at least {2 * div} for "
                           f"{levels} levels, got {img.shape[2]}x{img.shape[3]}")
    kernel = _binomial_kernel(img.shape[1], img.dtype)
    bands = []
    g = img
    for _ in range(levels):
        blurred = T.conv2d(T.reflect_pad2d(g, 2), kernel, None)
        g_next = T.decimate2(blurred)
        bands.append(g - T.bilinear_resize(g_next, 2))
        g = g_next
    return LaplacianPyramid(bands, g)


def lap_loss(pred: T.Tensor, target: T.Tensor,
             levels: int = PYRAMID_LEVELS) -> T.Tensor:
    """Sum over levels of 2^(i-1) * l1 of the band difference, i = 1..levels.

    The low-frequency residual is excluded, which makes the loss blind to a
    global intensity offset between prediction and target.
    """
    if pred.shape != target.shape:
        raise T.ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    pp = build_laplacian(pred, levels)
    tp = build_laplacian(target, levels)
    total = None
    for i, (lp, lt) in enumerate(zip(pp.levels, tp.levels)):
        term = l1_loss(lp, lt) * float(2 ** i)
        total = term if total is None else total + term
    return total


def feature_loss(pred: T.Tensor, target: T.Tensor,
                 phi: FeatureExtractor) -> T.Tensor:
    """Squared l2 distance between feature responses (sum reduction)."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = phi(pred) - phi(target)
    return T.tensor_sum(diff * diff)


class ConvStackFeatures:
    """Feature extractor loaded from 'feat.<i>.weight/bias' container entries.

    Convolutions run in entry order with stride 1 and size-preserving
    padding; a rectifier sits between consecutive convolutions.
    """

    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray]):
        self.layers = [(T.Tensor(w.copy()), T.Tensor(b.copy()))
                       for w, b in zip(weights, biases)]

    def __call__(self, x: T.Tensor) -> T.Tensor:
        for i, (w, b) in enumerate(self.layers):
            if i:
                x = T.maximum(x, T.zeros((), dtype=x.dtype))
            x = T.conv2d(x, w, b, stride=1, padding=w.shape[2] // 2)
        return x


def load_feature_extractor(container: TensorContainer) -> ConvStackFeatures:
    weights, biases = [], []
    i = 0
    while f"feat.{i}.weight" in container:
        w = container.get(f"feat.{i}.weight")
        bias_name = f"feat.{i}.bias"
        if bias_name not in container:
            raise CodecError(f"container is missing entry {bias_name!r}")
        if w.ndim != 4:
            raise CodecError(f"feat.{i}.weight has rank {w.ndim}, expected 4")
        biases.append(container.get(bias_name))
        weights.append(w)
        i += 1
    if not weights:
        raise CodecError("container holds no 'feat.*' entries")
    return ConvStackFeatures(weights, biases)
