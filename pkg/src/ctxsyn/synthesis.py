"""GridNet-based frame synthesis.

The network is a 3-row, 6-column grid. Rows keep a constant resolution
(full, 1/2, 1/4) and carry 32/64/96 channels; the first three columns send
information downward through stride-2 convolutions, the last three send it
upward through bilinear upsampling. Grid nodes combine their lateral and
vertical streams by addition. PReLU activations, no batch normalization.

The two warped frames are jointly instance-normalized before entering the
network and the normalization is reversed on the output; the two context
maps are jointly normalized without reversal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .codecs import CodecError, Frame, TensorContainer
from .context import ContextExtractor, load_extractor
from .warping import WarpBundle

EPS_NORM = 1e-8  # std floor; keeps constant inputs finite


@dataclass
class GridNetConfig:
    rows: int = 3
    cols: int = 6
    row_channels: Tuple[int, ...] = (32, 64, 96)
    in_channels: int = 134  # 3 + 3 image + 64 + 64 context
    out_channels: int = 3

    def __post_init__(self):
        if self.cols % 2:
            raise ValueError(f"column count must be even, got {self.cols}")
        if len(self.row_channels) != self.rows:
            raise ValueError(f"{self.rows} rows need {self.rows} channel sizes, "
                             f"got {self.row_channels}")


@dataclass
class NormStats:
    """Joint per-channel statistics of an input pair."""

    mean: T.Tensor  # (N, C, 1, 1)
    std: T.Tensor   # (N, C, 1, 1), floored at EPS_NORM


def instance_normalize_pair(a: T.Tensor, b: T.Tensor
                            ) -> Tuple[T.Tensor, T.Tensor, NormStats]:
    """Normalize both tensors with mean/std computed jointly over the pair."""
    if a.shape != b.shape:
        raise T.ShapeError(f"pair shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise T.ShapeError("cannot normalize empty tensors")
    count = 2 * a.shape[2] * a.shape[3]
    mean = (T.tensor_sum(a, axis=(2, 3), keepdims=True)
            + T.tensor_sum(b, axis=(2, 3), keepdims=True)) * (1.0 / count)
    da = a - mean
    db = b - mean
    var = (T.tensor_sum(da * da, axis=(2, 3), keepdims=True)
           + T.tensor_sum(db * db, axis=(2, 3), keepdims=True)) * (1.0 / count)
    # max(sqrt(var), eps) == sqrt(max(var, eps^2)); the inner floor keeps the
    # sqrt gradient finite for constant inputs
    std = T.sqrt(T.maximum(var, EPS_NORM ** 2))
    return da / std, db / std, NormStats(mean, std)


def denormalize(x: T.Tensor, stats: NormStats) -> T.Tensor:
    if x.shape[1] != stats.mean.shape[1]:
        raise T.ShapeError(f"channel mismatch: tensor has {x.shape[1]}, "
                           f"stats have {stats.mean.shape[1]}")
    return x * stats.std + stats.mean


# ---------------------------------------------------------------------------
# layers and blocks


class _Conv:
    def __init__(self, rng, c_in: int, c_out: int, stride: int = 1,
                 dtype=np.float32):
        bound = 1.0 / np.sqrt(c_in * 9)
        self.weight = T.Tensor(
            rng.uniform(-bound, bound, (c_out, c_in, 3, 3)).astype(dtype),
            requires_grad=True)
        self.bias = T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=1)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class _PReLU:
    def __init__(self, channels: int, dtype=np.float32):
        self.slope = T.Tensor(np.full(channels, 0.25, dtype=dtype),
                              requires_grad=True)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.prelu(x, self.slope)

    def params(self):
        return [("slope", self.slope)]


class _LateralBlock:
    """conv -> PReLU -> conv, plus the block input when channels allow."""

    name = "lateral"

    def __init__(self, rng, c_in: int, c_out: int, dtype=np.float32):
        self.layers = [_Conv(rng, c_in, c_out, dtype=dtype),
                       _PReLU(c_out, dtype=dtype),
                       _Conv(rng, c_out, c_out, dtype=dtype)]
        self.skip = c_in == c_out

    def __call__(self, x: T.Tensor) -> T.Tensor:
        out = self.layers[2](self.layers[1](self.layers[0](x)))
        return out + x if self.skip else out


class _DownBlock:
    """PReLU -> stride-2 conv -> PReLU -> conv; halves resolution."""

    name = "down"

    def __init__(self, rng, c_in: int, c_out: int, dtype=np.float32):
        self.layers = [_PReLU(c_in, dtype=dtype),
                       _Conv(rng, c_in, c_out, stride=2, dtype=dtype),
                       _PReLU(c_out, dtype=dtype),
                       _Conv(rng, c_out, c_out, dtype=dtype)]

    def __call__(self, x: T.Tensor) -> T.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class _UpBlock:
    """bilinear x2 -> PReLU -> conv -> PReLU -> conv; doubles resolution."""

    name = "up"

    def __init__(self, rng, c_in: int, c_out: int, dtype=np.float32):
        self.layers = [_PReLU(c_in, dtype=dtype),
                       _Conv(rng, c_in, c_out, dtype=dtype),
                       _PReLU(c_out, dtype=dtype),
                       _Conv(rng, c_out, c_out, dtype=dtype)]

    def __call__(self, x: T.Tensor) -> T.Tensor:
        x = T.bilinear_resize(x, 2)
        for layer in self.layers:
            x = layer(x)
        return x


class GridNet:
    """The synthesis grid; see the module docstring for the wiring."""

    def __init__(self, cfg: GridNetConfig = GridNetConfig(),
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        rc = cfg.row_channels
        self.head = _Conv(rng, cfg.in_channels, rc[0], dtype=dtype)
        self.tail = _Conv(rng, rc[0], cfg.out_channels, dtype=dtype)
        self.lateral: Dict[Tuple[int, int], _LateralBlock] = {}
        self.down: Dict[Tuple[int, int], _DownBlock] = {}
        self.up: Dict[Tuple[int, int], _UpBlock] = {}
        half = cfg.cols // 2
        for row in range(cfg.rows):
            # rows below the top enter column 0 through a down block alone
            first_col = 0 if row == 0 else 1
            for col in range(first_col, cfg.cols):
                self.lateral[(row, col)] = _LateralBlock(rng, rc[row], rc[row],
                                                         dtype=dtype)
        for col in range(half):
            for row in range(1, cfg.rows):
                self.down[(row, col)] = _DownBlock(rng, rc[row - 1], rc[row],
                                                   dtype=dtype)
        for col in range(half, cfg.cols):
            for row in range(cfg.rows - 1):
                self.up[(row, col)] = _UpBlock(rng, rc[row + 1], rc[row],
                                               dtype=dtype)

    def named_parameters(self) -> List[Tuple[str, T.Tensor]]:
        out = [(f"head.{k}", v) for k, v in self.head.params()]
        blocks = ([(row, col, b) for (row, col), b in self.lateral.items()]
                  + [(row, col, b) for (row, col), b in self.down.items()]
                  + [(row, col, b) for (row, col), b in self.up.items()])
        for row, col, block in sorted(blocks, key=lambda x: (x[0], x[1], x[2].name)):
            for idx, layer in enumerate(block.layers):
                for k, v in layer.params():
                    out.append((f"grid.{row}.{col}.{block.name}.{idx}.{k}", v))
        out.extend((f"tail.{k}", v) for k, v in self.tail.params())
        return out

    def parameters(self) -> List[T.Tensor]:
        return [p for _, p in self.named_parameters()]

    def forward(self, x: T.Tensor) -> T.Tensor:
        cfg = self.cfg
        if x.shape[1] != cfg.in_channels:
            raise T.ShapeError(f"gridnet expects {cfg.in_channels} input "
                               f"channels, got {x.shape[1]}")
        div = 1 << (cfg.rows - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise T.ShapeError(f"spatial dims must be divisible by {div}, "
                               f"got {x.shape[2]}x{x.shape[3]}")
        half = cfg.cols // 2
        col_state: List[Optional[T.Tensor]] = [None] * cfg.rows

        # column 0: head enters row 0, rows below are fed by downsampling alone
        col_state[0] = self.lateral[(0, 0)](self.head(x))
        for row in range(1, cfg.rows):
            col_state[row] = self.down[(row, 0)](col_state[row - 1])

        for col in range(1, cfg.cols):
            prev = col_state
            nxt: List[Optional[T.Tensor]] = [None] * cfg.rows
            if col < half:  # encoder: vertical stream runs downward
                for row in range(cfg.rows):
                    lateral = self.lateral[(row, col)](prev[row])
                    if row == 0:
                        nxt[row] = lateral
                    else:
                        nxt[row] = lateral + self.down[(row, col)](nxt[row - 1])
            else:  # decoder: vertical stream runs upward
                for row in range(cfg.rows - 1, -1, -1):
                    lateral = self.lateral[(row, col)](prev[row])
                    if row == cfg.rows - 1:
                        nxt[row] = lateral
                    else:
                        nxt[row] = lateral + self.up[(row, col)](nxt[row + 1])
            col_state = nxt

        return self.tail(col_state[0])

    __call__ = forward


def gridnet_forward(cfg: GridNetConfig, net: GridNet, x: T.Tensor) -> T.Tensor:
    if net.cfg != cfg:
        raise ValueError("configuration does not match the network")
    return net.forward(x)


# ---------------------------------------------------------------------------
# full synthesis model


class SynthesisModel:
    """GridNet plus the context extractor it was trained with."""

    def __init__(self, net: GridNet, extractor: Optional[ContextExtractor]):
        self.net = net
        self.extractor = extractor

    @staticmethod
    def create(seed: int = 0, cfg: GridNetConfig = GridNetConfig(),
               dtype=np.float32, trainable_context: bool = True
               ) -> "SynthesisModel":
        rng = np.random.default_rng(seed)
        net = GridNet(cfg, rng, dtype=dtype)
        extractor = ContextExtractor.random(rng, trainable=trainable_context,
                                            dtype=dtype)
        return SynthesisModel(net, extractor)

    def parameters(self) -> List[T.Tensor]:
        params = self.net.parameters()
        if self.extractor is not None:
            params.extend(self.extractor.parameters())
        return params

    def forward_pair(self, img1: T.Tensor, img2: T.Tensor,
                     ctx1: T.Tensor, ctx2: T.Tensor) -> T.Tensor:
        """Normalized synthesis on batched tensors; differentiable."""
        n1, n2, stats = instance_normalize_pair(img1, img2)
        c1, c2, _ = instance_normalize_pair(ctx1, ctx2)
        x = T.concat([n1, n2, c1, c2], axis=1)
        return denormalize(self.net(x), stats)

    def save(self) -> TensorContainer:
        container = TensorContainer()
        for name, p in self.net.named_parameters():
            container.add(name, p.data)
        if self.extractor is not None:
            self.extractor.save_into(container)
        return container

    @staticmethod
    def load(container: TensorContainer) -> "SynthesisModel":
        cfg = _infer_config(container)
        net = GridNet(cfg, np.random.default_rng(0))
        for name, p in net.named_parameters():
            if name not in container:
                raise CodecError(f"checkpoint is missing entry {name!r}")
            arr = container.get(name)
            if arr.shape != p.shape:
                raise CodecError(f"entry {name!r} has shape {arr.shape}, "
                                 f"expected {p.shape}")
            p.data = arr.copy()
        extractor = None
        if "ctx.weight" in container:
            extractor = load_extractor(container)
        return SynthesisModel(net, extractor)


def _infer_config(container: TensorContainer) -> GridNetConfig:
    head = container.get("head.weight")
    if head.ndim != 4:
        raise CodecError(f"head.weight has rank {head.ndim}, expected 4")
    rows = 1
    channels = [head.shape[0]]
    while f"grid.{rows}.0.down.1.weight" in container:
        channels.append(container.get(f"grid.{rows}.0.down.1.weight").shape[0])
        rows += 1
    cols = 0
    while f"grid.0.{cols}.lateral.0.weight" in container:
        cols += 1
    tail = container.get("tail.weight")
    return GridNetConfig(rows=rows, cols=cols, row_channels=tuple(channels),
                         in_channels=head.shape[1], out_channels=tail.shape[0])


def synthesize(b1: WarpBundle, b2: WarpBundle, model: SynthesisModel,
               zero_context: bool = False) -> Frame:
    """Run the synthesis network on a pair of warp bundles.

    Output values may overshoot [0, 1]; they are clamped only when encoded.
    """
    if b1.image.shape != b2.image.shape:
        raise ValueError(f"bundle shapes differ: {b1.image.shape} vs "
                         f"{b2.image.shape}")
    if b1.t != b2.t:
        raise ValueError(f"bundles disagree on t: {b1.t} vs {b2.t}")
    ctx_shape = (64,) + b1.image.shape[1:]
    if zero_context or b1.context is None or b2.context is None:
        ctx1 = np.zeros(ctx_shape, dtype=np.float32)
        ctx2 = np.zeros(ctx_shape, dtype=np.float32)
    else:
        ctx1, ctx2 = b1.context, b2.context

    h, w = b1.image.shape[1:]
    div = 1 << (model.net.cfg.rows - 1)
    pad_h = (-h) % div
    pad_w = (-w) % div

    def prep(arr: np.ndarray) -> T.Tensor:
        if pad_h or pad_w:
            arr = np.pad(arr, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
        return T.Tensor(arr[np.newaxis].astype(np.float32))

    with T.no_grad():
        out = model.forward_pair(prep(b1.image), prep(b2.image),
                                 prep(ctx1), prep(ctx2))
    result = out.data[0, :, :h, :w].astype(np.float32)
    return Frame.from_array(result)
