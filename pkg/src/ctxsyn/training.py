"""Dataset construction (triplet extraction, patch scoring, augmentation)
and the end-to-end training loop.

Training always targets t = 0.5: the center frame of each triplet is the
ground truth, so no other temporal position has a label. Inference t stays
free. Flow for training samples is computed once and cached as .flo
sidecars; augmentation transforms the cached fields instead of re-running
the estimator.
"""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .codecs import (Frame, FlowField, TensorContainer, read_flo, read_image,
                     write_flo)
from .context import ContextExtractor
from .flow import PyramidConfig, estimate_flow, fit_levels, mean_flow_magnitude
from .losses import feature_loss, l1_loss, lap_loss
from .optim import AdaMax, NonFiniteGradient
from .synthesis import SynthesisModel
from .warping import (check_brightness_constancy, make_splat_plan,
                      splat_channels, splat_tensor, DEFAULT_TAU)

log = logging.getLogger(__name__)

TRAIN_T = 0.5  # the only temporal position with a ground-truth label

LOSS_L1 = "l1"
LOSS_LAP = "lap"
LOSS_FEATURE_REFINE = "feature-refine"

_FRAME_RE = re.compile(r"^(\d+)\.ppm$")


class EmptyDataset(ValueError):
    """No usable triplets were found."""


class TrainingAborted(RuntimeError):
    """Loss went non-finite; the model was rolled back to the last good step."""


@dataclass
class Triplet:
    first: Frame
    middle: Frame  # ground truth
    last: Frame
    source_id: str = ""
    origin: Tuple[int, int] = (0, 0)  # (y, x) of the patch in its source frame
    flow_fwd: Optional[FlowField] = None  # first -> last
    flow_bwd: Optional[FlowField] = None  # last -> first
    sidecar_base: Optional[Path] = None   # where .fwd.flo/.bwd.flo live


@dataclass
class TrainConfig:
    loss: str = LOSS_LAP
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    batch: int = 8
    epochs: int = 50
    crop: int = 256
    seed: int = 0
    tau: float = DEFAULT_TAU
    augment: bool = True
    max_iterations: Optional[int] = None  # stop early after this many steps
    checkpoint_every: int = 1             # epochs between periodic checkpoints

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.loss not in (LOSS_L1, LOSS_LAP, LOSS_FEATURE_REFINE):
            raise ValueError(f"unknown loss {self.loss!r}")


# ---------------------------------------------------------------------------
# dataset construction


def extract_triplets(frames: Sequence[Frame], source_id: str = "") -> List[Triplet]:
    """Split a frame sequence into non-overlapping triplets (1-2-3, 4-5-6...)."""
    if len(frames) < 3:
        log.warning("sequence %s has %d frames, need 3 for a triplet",
                    source_id or "<anon>", len(frames))
        return []
    dims = {(f.width, f.height) for f in frames}
    if len(dims) > 1:
        raise ValueError(f"sequence {source_id or '<anon>'} mixes frame "
                         f"dimensions: {sorted(dims)}")
    out = []
    for i in range(0, len(frames) - 2, 3):
        out.append(Triplet(frames[i], frames[i + 1], frames[i + 2],
                           source_id=f"{source_id}:{i}" if source_id else str(i)))
    return out


def _crop_frame(frame: Frame, y: int, x: int, size: int) -> Frame:
    return Frame.from_array(frame.rgb[:, y:y + size, x:x + size].copy())


def harvest_patches(triplet: Triplet, patch: int = 300,
                    stride: int = 150) -> List[Triplet]:
    """Cut a triplet into raw candidate patches on a fixed stride grid."""
    h, w = triplet.first.height, triplet.first.width
    if h < patch or w < patch:
        return []
    ys = list(range(0, h - patch + 1, stride))
    xs = list(range(0, w - patch + 1, stride))
    out = []
    for y in ys:
        for x in xs:
            out.append(Triplet(_crop_frame(triplet.first, y, x, patch),
                               _crop_frame(triplet.middle, y, x, patch),
                               _crop_frame(triplet.last, y, x, patch),
                               source_id=triplet.source_id, origin=(y, x)))
    return out


_LAPLACIAN_3x3 = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


def score_patch(t: Triplet,
                cfg: PyramidConfig = PyramidConfig()) -> Tuple[float, float]:
    """(motion, detail): mean flow magnitude first->last, and the mean
    absolute 3x3 Laplacian response of the middle frame's luma."""
    flow = estimate_flow(t.first, t.last,
                         fit_levels(t.first.height, t.first.width, cfg))
    motion = mean_flow_magnitude(flow)
    luma = np.pad(t.middle.luma().astype(np.float64), 1, mode="reflect")
    lap = sum(_LAPLACIAN_3x3[dy + 1, dx + 1]
              * luma[1 + dy:luma.shape[0] - 1 + dy, 1 + dx:luma.shape[1] - 1 + dx]
              for dy in (-1, 0, 1) for dx in (-1, 0, 1)
              if _LAPLACIAN_3x3[dy + 1, dx + 1])
    return motion, float(np.abs(lap).mean())


def select_patches(candidates: Sequence[Triplet], count: int,
                   scores: Optional[Sequence[Tuple[float, float]]] = None
                   ) -> List[Triplet]:
    """Keep the patches with the best combined motion-rank + detail-rank.

    Equal weighting of the two ranks; every tie breaks toward source order.
    """
    if count > len(candidates):
        raise ValueError(f"asked for {count} of {len(candidates)} candidates")
    if scores is None:
        scores = [score_patch(c) for c in candidates]
    motion = np.array([s[0] for s in scores])
    detail = np.array([s[1] for s in scores])
    rank_m = np.empty(len(candidates), dtype=np.int64)
    rank_m[np.argsort(-motion, kind="stable")] = np.arange(len(candidates))
    rank_d = np.empty(len(candidates), dtype=np.int64)
    rank_d[np.argsort(-detail, kind="stable")] = np.arange(len(candidates))
    order = np.argsort(rank_m + rank_d, kind="stable")
    return [candidates[i] for i in order[:count]]


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class TrainExample:
    first: Frame
    last: Frame
    target: Frame
    flow_fwd: FlowField  # first -> last, matching any crop/flip/swap applied
    flow_bwd: FlowField


def _crop_flow(flow: FlowField, y: int, x: int, size: int) -> FlowField:
    return FlowField(size, size, flow.u[y:y + size, x:x + size].copy(),
                     flow.v[y:y + size, x:x + size].copy())


def _flip_flow_h(flow: FlowField) -> FlowField:
    return FlowField(flow.width, flow.height, -flow.u[:, ::-1].copy(),
                     flow.v[:, ::-1].copy())


def _flip_flow_v(flow: FlowField) -> FlowField:
    return FlowField(flow.width, flow.height, flow.u[::-1, :].copy(),
                     -flow.v[::-1, :].copy())


def _flip_frame(frame: Frame, horizontal: bool) -> Frame:
    axis = 2 if horizontal else 1
    return Frame.from_array(np.flip(frame.rgb, axis=axis).copy())


def augment(t: Triplet, rng: np.random.Generator, crop: int = 256,
            force: Optional[Tuple[bool, bool, bool]] = None) -> TrainExample:
    """Random crop plus independent 50% horizontal flip, vertical flip and
    temporal swap. The middle frame is always the target. ``force`` pins the
    three flags for tests; the crop origin is still drawn from ``rng``.
    """
    h, w = t.first.height, t.first.width
    if h < crop or w < crop:
        raise ValueError(f"patch {w}x{h} smaller than crop {crop}")
    if t.flow_fwd is None or t.flow_bwd is None:
        raise ValueError("triplet needs flow fields before augmentation")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    if force is None:
        hflip, vflip, swap = (bool(rng.random() < 0.5) for _ in range(3))
    else:
        hflip, vflip, swap = force

    first, last, target = t.first, t.last, t.middle
    fwd, bwd = t.flow_fwd, t.flow_bwd
    first, last, target = (_crop_frame(f, y, x, crop) for f in (first, last, target))
    fwd, bwd = _crop_flow(fwd, y, x, crop), _crop_flow(bwd, y, x, crop)
    if hflip:
        first, last, target = (_flip_frame(f, True) for f in (first, last, target))
        fwd, bwd = _flip_flow_h(fwd), _flip_flow_h(bwd)
    if vflip:
        first, last, target = (_flip_frame(f, False) for f in (first, last, target))
        fwd, bwd = _flip_flow_v(fwd), _flip_flow_v(bwd)
    if swap:
        first, last = last, first
        fwd, bwd = bwd, fwd
    return TrainExample(first, last, target, fwd, bwd)


# ---------------------------------------------------------------------------
# dataset I/O


def load_dataset(root: Path) -> List[Triplet]:
    """Read `<root>/<clip>/NNNNNN.ppm` sequences (or frames directly under
    root) into triplets, picking up .fwd.flo/.bwd.flo sidecars when present.
    The sidecar is named after the triplet's first frame."""
    root = Path(root)
    clip_dirs = sorted(p for p in root.iterdir() if p.is_dir()) or [root]
    triplets: List[Triplet] = []
    for clip in clip_dirs:
        numbered = []
        for p in clip.iterdir():
            m = _FRAME_RE.match(p.name)
            if m:
                numbered.append((int(m.group(1)), p))
        numbered.sort()
        if not numbered:
            continue
        frames = [read_image(p.read_bytes()) for _, p in numbered]
        clip_triplets = extract_triplets(frames, source_id=clip.name)
        for i, trip in enumerate(clip_triplets):
            base = numbered[3 * i][1]
            trip.sidecar_base = base.with_suffix("")
            fwd = trip.sidecar_base.with_suffix(".fwd.flo")
            bwd = trip.sidecar_base.with_suffix(".bwd.flo")
            if fwd.exists():
                trip.flow_fwd = read_flo(fwd.read_bytes())
            if bwd.exists():
                trip.flow_bwd = read_flo(bwd.read_bytes())
        triplets.extend(clip_triplets)
    return triplets


def ensure_flows(triplets: Sequence[Triplet], cache: bool = True,
                 cfg: PyramidConfig = PyramidConfig()) -> None:
    """Estimate missing bidirectional flows; write sidecars when caching."""
    for trip in triplets:
        if trip.flow_fwd is None:
            fitted = fit_levels(trip.first.height, trip.first.width, cfg)
            trip.flow_fwd = estimate_flow(trip.first, trip.last, fitted)
            trip.flow_bwd = estimate_flow(trip.last, trip.first, fitted)
            if cache and trip.sidecar_base is not None:
                trip.sidecar_base.with_suffix(".fwd.flo").write_bytes(
                    write_flo(trip.flow_fwd))
                trip.sidecar_base.with_suffix(".bwd.flo").write_bytes(
                    write_flo(trip.flow_bwd))
        elif trip.flow_bwd is None:
            fitted = fit_levels(trip.first.height, trip.first.width, cfg)
            trip.flow_bwd = estimate_flow(trip.last, trip.first, fitted)
            if cache and trip.sidecar_base is not None:
                trip.sidecar_base.with_suffix(".bwd.flo").write_bytes(
                    write_flo(trip.flow_bwd))


def dataset_flow_stats(triplets: Sequence[Triplet]) -> dict:
    """Average/max flow magnitude and the fraction of pixels >= 21 px,
    mirroring the statistics quoted for the reference corpus."""
    mags = []
    for trip in triplets:
        if trip.flow_fwd is None:
            continue
        u = trip.flow_fwd.u.astype(np.float64)
        v = trip.flow_fwd.v.astype(np.float64)
        mags.append(np.sqrt(u * u + v * v).ravel())
    if not mags:
        raise EmptyDataset("no flow fields to summarize")
    mag = np.concatenate(mags)
    return {"average_flow_px": float(mag.mean()),
            "max_flow_px": float(mag.max()),
            "fraction_ge_21px": float((mag >= 21.0).mean())}


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class MetricsRow:
    iteration: int
    epoch: int
    loss: float
    wall_time: float


@dataclass
class TrainResult:
    model: SynthesisModel
    metrics: List[MetricsRow] = field(default_factory=list)
    aborted: bool = False


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    out = ["iteration,epoch,loss,wall_time"]
    out.extend(f"{r.iteration},{r.epoch},{r.loss!r},{r.wall_time:.3f}"
               for r in rows)
    return "\n".join(out) + "\n"


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    # one stream per (epoch, sample); workers never share streams
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


class _BatchBuilder:
    """Turns triplets into network inputs; caches splat geometry when the
    pipeline is deterministic (no augmentation)."""

    def __init__(self, cfg: TrainConfig, extractor: Optional[ContextExtractor]):
        self.cfg = cfg
        self.extractor = extractor
        self._plan_cache: dict = {}

    def example(self, triplets: Sequence[Triplet], epoch: int, index: int
                ) -> TrainExample:
        trip = triplets[index]
        if self.cfg.augment:
            rng = _sample_rng(self.cfg.seed, epoch, index)
            return augment(trip, rng, crop=self.cfg.crop)
        return TrainExample(trip.first, trip.last, trip.middle,
                            trip.flow_fwd, trip.flow_bwd)

    def plans(self, ex: TrainExample, index: int):
        key = index if not self.cfg.augment else None
        if key is not None and key in self._plan_cache:
            return self._plan_cache[key]
        valid1 = check_brightness_constancy(ex.first, ex.last, ex.flow_fwd,
                                            self.cfg.tau)
        valid2 = check_brightness_constancy(ex.last, ex.first, ex.flow_bwd,
                                            self.cfg.tau)
        plan1 = make_splat_plan(ex.flow_fwd, TRAIN_T, valid1)
        plan2 = make_splat_plan(ex.flow_bwd, 1.0 - TRAIN_T, valid2)
        warped1 = splat_channels(plan1, ex.first.rgb)
        warped2 = splat_channels(plan2, ex.last.rgb)
        entry = (plan1, plan2, warped1, warped2)
        if key is not None:
            self._plan_cache[key] = entry
        return entry


def _batch_forward(model: SynthesisModel, builder: _BatchBuilder,
                   triplets: Sequence[Triplet], indices: Sequence[int],
                   epoch: int) -> Tuple[T.Tensor, T.Tensor]:
    """Returns (prediction, target) tensors for one mini-batch."""
    examples = [builder.example(triplets, epoch, i) for i in indices]
    geo = [builder.plans(ex, i) for ex, i in zip(examples, indices)]

    frames1 = np.stack([ex.first.rgb for ex in examples])
    frames2 = np.stack([ex.last.rgb for ex in examples])
    ctx1 = model.extractor.forward(T.Tensor(frames1))
    ctx2 = model.extractor.forward(T.Tensor(frames2))

    img1 = T.Tensor(np.stack([g[2] for g in geo]))
    img2 = T.Tensor(np.stack([g[3] for g in geo]))
    wctx1 = T.concat([splat_tensor(geo[n][0], T.slice_axis(ctx1, 0, n, n + 1))
                      for n in range(len(examples))], axis=0)
    wctx2 = T.concat([splat_tensor(geo[n][1], T.slice_axis(ctx2, 0, n, n + 1))
                      for n in range(len(examples))], axis=0)

    pred = model.forward_pair(img1, img2, wctx1, wctx2)
    target = T.Tensor(np.stack([ex.target.rgb for ex in examples]))
    return pred, target


def train(triplets: Sequence[Triplet], cfg: TrainConfig,
          model: Optional[SynthesisModel] = None,
          optimizer: Optional[AdaMax] = None,
          on_epoch_end: Optional[Callable[[int, SynthesisModel], None]] = None,
          log_every: int = 10) -> TrainResult:
    """Run the training loop; see TrainConfig for the protocol knobs.

    feature-refine mode expects ``model`` to come from a checkpoint trained
    with the Laplacian loss first; the feature extractor for the loss is a
    frozen snapshot of the model's context extractor taken at start.
    """
    triplets = list(triplets)
    if not triplets:
        raise EmptyDataset("training dataset is empty")
    for trip in triplets:
        if trip.flow_fwd is None or trip.flow_bwd is None:
            raise ValueError(f"triplet {trip.source_id!r} is missing flow; "
                             "run ensure_flows first")
    if model is None:
        model = SynthesisModel.create(seed=cfg.seed)
    if model.extractor is None:
        raise ValueError("training requires a model with a context extractor")
    if optimizer is None:
        optimizer = AdaMax(model.parameters(), lr=cfg.lr,
                           beta1=cfg.beta1, beta2=cfg.beta2)

    phi = None
    if cfg.loss == LOSS_FEATURE_REFINE:
        frozen = ContextExtractor(
            T.Tensor(model.extractor.weight.data.copy()),
            T.Tensor(model.extractor.bias.data.copy()),
            activation=model.extractor.activation, trainable=False)
        phi = frozen.forward

    builder = _BatchBuilder(cfg, model.extractor)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 0xC0FFEE]))
    params = model.parameters()
    last_good = [p.data.copy() for p in params]
    result = TrainResult(model)
    start = time.monotonic()
    iteration = 0

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(triplets))
        for lo in range(0, len(order), cfg.batch):
            if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
                return result
            indices = [int(i) for i in order[lo:lo + cfg.batch]]
            pred, target = _batch_forward(model, builder, triplets,
                                          indices, epoch)
            if cfg.loss == LOSS_L1:
                loss = l1_loss(pred, target)
            elif cfg.loss == LOSS_LAP:
                loss = lap_loss(pred, target)
            else:
                loss = feature_loss(pred, target, phi)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                for p, good in zip(params, last_good):
                    p.data = good.copy()
                result.aborted = True
                raise TrainingAborted(
                    f"non-finite loss {loss_val} at iteration {iteration}; "
                    "model rolled back to the last finite step")
            optimizer.zero_grad()
            T.backward(loss)
            try:
                optimizer.step()
            except NonFiniteGradient as exc:
                for p, good in zip(params, last_good):
                    p.data = good.copy()
                result.aborted = True
                raise TrainingAborted(str(exc)) from exc
            last_good = [p.data.copy() for p in params]
            iteration += 1
            if iteration % log_every == 0 or iteration == 1:
                result.metrics.append(MetricsRow(
                    iteration, epoch, loss_val, time.monotonic() - start))
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return result


# ---------------------------------------------------------------------------
# optimizer checkpointing (sidecar, so the model container keeps its schema)


def optimizer_to_container(opt: AdaMax) -> TensorContainer:
    container = TensorContainer()
    container.add("opt.step", np.array([opt.state.step], dtype=np.float32))
    container.add("opt.hyper", np.array(
        [opt.state.lr, opt.state.beta1, opt.state.beta2], dtype=np.float32))
    for i, (m, u) in enumerate(zip(opt.state.m, opt.state.u)):
        container.add(f"opt.{i}.m", m)
        container.add(f"opt.{i}.u", u)
    return container


def optimizer_from_container(container: TensorContainer,
                             params: Sequence[T.Tensor]) -> AdaMax:
    lr, beta1, beta2 = container.get("opt.hyper")
    opt = AdaMax(params, lr=float(lr), beta1=float(beta1), beta2=float(beta2))
    opt.state.step = int(container.get("opt.step")[0])
    opt.state.m = [container.get(f"opt.{i}.m").copy() for i in range(len(params))]
    opt.state.u = [container.get(f"opt.{i}.u").copy() for i in range(len(params))]
    for m, p in zip(opt.state.m, params):
        if m.shape != p.shape:
            raise ValueError(f"optimizer state shape {m.shape} does not match "
                             f"parameter shape {p.shape}")
    return opt
