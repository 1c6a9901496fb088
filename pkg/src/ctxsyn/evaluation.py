"""PSNR/SSIM metrics and the batch evaluation harness that compares the
synthesis network against the pixel-wise blending baselines.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .codecs import FlowField, Frame
from .context import extract_context
from .synthesis import SynthesisModel, synthesize
from .threads import map_ordered
from .warping import DEFAULT_TAU, blend_baseline, prewarp_pair

log = logging.getLogger(__name__)

METHOD_MODEL = "model"
METHOD_BIDIRECTIONAL = "bidirectional-blend"
METHOD_FORWARD = "forward-blend"

CSV_HEADER = "example,method,psnr_db,ssim"

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a: Frame, b: Frame) -> float:
    """10*log10(1/mse) over all RGB values on the [0, 1] scale; +inf when
    the images are identical."""
    if a.rgb.shape != b.rgb.shape:
        raise ValueError(f"frame shapes differ: {a.rgb.shape} vs {b.rgb.shape}")
    diff = a.rgb.astype(np.float64) - b.rgb.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _windows(img: np.ndarray, size: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(img, (size, size))


def ssim(a: Frame, b: Frame) -> float:
    """Single-scale SSIM on Rec.601 luma.

    11x11 Gaussian window (sigma 1.5), biased Gaussian-weighted moments,
    averaged over window positions that fit entirely inside the image.
    """
    if a.rgb.shape != b.rgb.shape:
        raise ValueError(f"frame shapes differ: {a.rgb.shape} vs {b.rgb.shape}")
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ValueError(f"image {a.width}x{a.height} smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x = a.luma().astype(np.float64)
    y = b.luma().astype(np.float64)
    k1 = _gaussian_kernel1d(SSIM_SIGMA, SSIM_WINDOW // 2)
    kernel = np.outer(k1, k1)

    wx = _windows(x, SSIM_WINDOW)
    wy = _windows(y, SSIM_WINDOW)
    mu_x = np.tensordot(wx, kernel, axes=((2, 3), (0, 1)))
    mu_y = np.tensordot(wy, kernel, axes=((2, 3), (0, 1)))
    xx = np.tensordot(wx * wx, kernel, axes=((2, 3), (0, 1)))
    yy = np.tensordot(wy * wy, kernel, axes=((2, 3), (0, 1)))
    xy = np.tensordot(wx * wy, kernel, axes=((2, 3), (0, 1)))
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y

    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# batch evaluation


@dataclass
class EvalExample:
    name: str
    first: Frame
    second: Frame
    ground_truth: Optional[Frame]
    flow_fwd: FlowField
    flow_bwd: FlowField


@dataclass
class EvalRow:
    example: str
    method: str
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)

    def methods(self) -> List[str]:
        seen = []
        for row in self.rows:
            if row.method not in seen:
                seen.append(row.method)
        return seen

    def mean_psnr(self, method: str) -> float:
        vals = [r.psnr_db for r in self.rows if r.method == method]
        return float(np.mean(vals)) if vals else math.nan

    def mean_ssim(self, method: str) -> float:
        vals = [r.ssim for r in self.rows if r.method == method]
        return float(np.mean(vals)) if vals else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.rows:
            buf.write(f"{r.example},{r.method},{r.psnr_db!r},{r.ssim!r}\n")
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "EvalReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != CSV_HEADER:
            raise ValueError(f"unexpected CSV header: {lines[:1]}")
        rows = []
        for ln in lines[1:]:
            example, method, p, s = ln.split(",")
            rows.append(EvalRow(example, method, float(p), float(s)))
        return EvalReport(rows)

    def summary_table(self) -> str:
        lines = [f"{'method':<22}{'psnr_db':>10}{'ssim':>9}"]
        for method in self.methods():
            lines.append(f"{method:<22}{self.mean_psnr(method):>10.3f}"
                         f"{self.mean_ssim(method):>9.4f}")
        return "\n".join(lines)


def evaluate(examples: Sequence[EvalExample], model: SynthesisModel,
             t: float = 0.5, tau: float = DEFAULT_TAU,
             with_baselines: bool = True,
             zero_context: bool = False) -> EvalReport:
    """Interpolate every example and score it against its ground truth.

    Emits one row per (example, method); examples without ground truth are
    skipped with a warning. Examples run in parallel worker threads; rows
    keep the input order.
    """

    drop_context = zero_context or model.extractor is None

    def run(example: EvalExample):
        if example.ground_truth is None:
            log.warning("skipping %s: no ground truth", example.name)
            return []
        c1 = c2 = None
        if not drop_context:
            c1 = extract_context(example.first, model.extractor)
            c2 = extract_context(example.second, model.extractor)
        b1, b2 = prewarp_pair(example.first, example.second, c1, c2,
                              example.flow_fwd, example.flow_bwd, t, tau)
        gt = example.ground_truth
        out = synthesize(b1, b2, model, zero_context=drop_context)
        rows = [EvalRow(example.name, METHOD_MODEL, psnr(out, gt), ssim(out, gt))]
        if with_baselines:
            bid = blend_baseline(b1, b2, t)
            fwd = Frame.from_array(b1.image)  # forward flow only, holes zero
            rows.append(EvalRow(example.name, METHOD_BIDIRECTIONAL,
                                psnr(bid, gt), ssim(bid, gt)))
            rows.append(EvalRow(example.name, METHOD_FORWARD,
                                psnr(fwd, gt), ssim(fwd, gt)))
        return rows

    report = EvalReport()
    for rows in map_ordered(run, list(examples)):
        report.rows.extend(rows)
    return report
