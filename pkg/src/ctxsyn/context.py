"""Per-pixel context extraction: a single 7x7, stride-1, 64-channel
convolution whose response describes each pixel's neighborhood. Weights are
either trained jointly with the synthesis network or loaded from a container
(e.g. externally folded backbone weights).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .codecs import CodecError, Frame, TensorContainer

CONTEXT_CHANNELS = 64
KERNEL = 7
PAD = 3  # keeps the context map the same size as the frame

WEIGHT_ENTRY = "ctx.weight"
BIAS_ENTRY = "ctx.bias"
_WEIGHT_SHAPE = (CONTEXT_CHANNELS, 3, KERNEL, KERNEL)
_BIAS_SHAPE = (CONTEXT_CHANNELS,)


@dataclass
class ContextMap:
    """64 feature channels on the same pixel grid as the source frame."""

    width: int
    height: int
    features: np.ndarray  # (64, H, W) float32


class ContextExtractor:
    """Holds the 7x7 convolution parameters and the activation toggle."""

    def __init__(self, weight: T.Tensor, bias: T.Tensor,
                 activation: bool = True, trainable: bool = True):
        if weight.shape != _WEIGHT_SHAPE:
            raise CodecError(f"context weight must be {_WEIGHT_SHAPE}, "
                             f"got {weight.shape}")
        if bias.shape != _BIAS_SHAPE:
            raise CodecError(f"context bias must be {_BIAS_SHAPE}, got {bias.shape}")
        self.weight = weight
        self.bias = bias
        self.activation = activation
        self.trainable = trainable
        weight.requires_grad = trainable
        bias.requires_grad = trainable
        if trainable:
            weight.zero_grad()
            bias.zero_grad()

    @staticmethod
    def random(rng: np.random.Generator, activation: bool = True,
               trainable: bool = True, dtype=np.float32) -> "ContextExtractor":
        fan_in = 3 * KERNEL * KERNEL
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, _WEIGHT_SHAPE).astype(dtype)
        bias = np.zeros(_BIAS_SHAPE, dtype=dtype)
        return ContextExtractor(T.Tensor(weight), T.Tensor(bias),
                                activation=activation, trainable=trainable)

    def parameters(self):
        return [self.weight, self.bias] if self.trainable else []

    def forward(self, x: T.Tensor) -> T.Tensor:
        """(N, 3, H, W) -> (N, 64, H, W); differentiable when trainable."""
        out = T.conv2d(x, self.weight, self.bias, stride=1, padding=PAD)
        if self.activation:
            out = T.maximum(out, T.zeros((), dtype=out.dtype))
        return out

    def save_into(self, container: TensorContainer) -> None:
        container.add(WEIGHT_ENTRY, self.weight.data)
        container.add(BIAS_ENTRY, self.bias.data)


def extract_context(frame: Frame, extractor: ContextExtractor) -> ContextMap:
    if frame.rgb.size == 0:
        raise ValueError("cannot extract context from an empty frame")
    with T.no_grad():
        x = T.Tensor(frame.rgb[np.newaxis].astype(extractor.weight.dtype))
        features = extractor.forward(x).data[0]
    return ContextMap(frame.width, frame.height, features.astype(np.float32))


def load_extractor(container: TensorContainer,
                   activation: bool = True) -> ContextExtractor:
    """Build an extractor from container entries; loaded weights are frozen."""
    for entry, shape in ((WEIGHT_ENTRY, _WEIGHT_SHAPE), (BIAS_ENTRY, _BIAS_SHAPE)):
        if entry not in container:
            raise CodecError(f"container is missing entry {entry!r}")
        if container.get(entry).shape != shape:
            raise CodecError(f"entry {entry!r} has shape "
                             f"{container.get(entry).shape}, expected {shape}")
    return ContextExtractor(T.Tensor(container.get(WEIGHT_ENTRY).copy()),
                            T.Tensor(container.get(BIAS_ENTRY).copy()),
                            activation=activation, trainable=False)
