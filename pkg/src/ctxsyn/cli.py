"""Command-line front end: interpolate, flow, train, eval.

Exit codes: 0 success, 1 bad usage, 2 I/O failure, 3 empty or invalid data,
4 numeric failure. Every run writes a manifest sidecar recording the
resolved configuration, input hashes, seed and tool version, so reruns are
reproducible bit for bit.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .codecs import (CodecError, Frame, read_flo, read_image, write_container,
                     read_container, write_flo, write_image)
from .context import extract_context
from .evaluation import EvalExample, evaluate
from .flow import PyramidConfig, estimate_flow, fit_levels
from .optim import AdaMax, NonFiniteGradient
from .synthesis import SynthesisModel, synthesize
from .training import (EmptyDataset, TrainConfig, TrainingAborted,
                       dataset_flow_stats, ensure_flows, load_dataset,
                       metrics_csv, optimizer_from_container,
                       optimizer_to_container, train)
from .warping import DEFAULT_TAU, prewarp_pair

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_path: Path, args: argparse.Namespace,
                    input_paths: List[Path]) -> None:
    lines = [f"tool_version={__version__}", f"command={args.command}"]
    for key in sorted(vars(args)):
        if key == "command":
            continue
        lines.append(f"{key}={getattr(args, key)}")
    for p in sorted(set(map(Path, input_paths))):
        if p.exists() and p.is_file():
            lines.append(f"sha256[{p}]={_sha256(p)}")
    manifest = out_path.with_name(out_path.name + ".manifest")
    manifest.write_text("\n".join(lines) + "\n")


def _load_frame(path: Path) -> Frame:
    return read_image(path.read_bytes())


def _load_model(path: Path) -> SynthesisModel:
    return SynthesisModel.load(read_container(path.read_bytes()))


def _flows_for(first: Frame, second: Frame, fwd_path: Optional[Path],
               bwd_path: Optional[Path]):
    if fwd_path is not None and bwd_path is not None:
        return (read_flo(fwd_path.read_bytes()),
                read_flo(bwd_path.read_bytes()))
    cfg = fit_levels(first.height, first.width, PyramidConfig())
    return (estimate_flow(first, second, cfg),
            estimate_flow(second, first, cfg))


def _weight_to_frame(weight: np.ndarray) -> Frame:
    scale = max(float(weight.max()), 1.0)
    gray = (weight / scale).astype(np.float32)
    return Frame.from_array(np.stack([gray, gray, gray]))


def cmd_interpolate(args) -> int:
    first = _load_frame(args.first)
    second = _load_frame(args.second)
    model = _load_model(args.weights)
    flow_fwd, flow_bwd = _flows_for(first, second, args.flow_fwd, args.flow_bwd)

    c1 = c2 = None
    if model.extractor is not None:
        c1 = extract_context(first, model.extractor)
        c2 = extract_context(second, model.extractor)
    b1, b2 = prewarp_pair(first, second, c1, c2, flow_fwd, flow_bwd,
                          args.t, args.tau)
    out = synthesize(b1, b2, model, zero_context=model.extractor is None)
    args.out.write_bytes(write_image(out))
    if args.emit_warped:
        stem = args.out.with_suffix("")
        for tag, bundle in (("warped1", b1), ("warped2", b2)):
            Path(f"{stem}.{tag}.ppm").write_bytes(
                write_image(Frame.from_array(bundle.image)))
            Path(f"{stem}.{tag}.weight.ppm").write_bytes(
                write_image(_weight_to_frame(bundle.weight)))
    inputs = [args.first, args.second, args.weights]
    inputs += [p for p in (args.flow_fwd, args.flow_bwd) if p is not None]
    _write_manifest(args.out, args, inputs)
    return EXIT_OK


def cmd_flow(args) -> int:
    first = _load_frame(args.first)
    second = _load_frame(args.second)
    cfg = fit_levels(first.height, first.width, PyramidConfig())
    args.out_fwd.write_bytes(write_flo(estimate_flow(first, second, cfg)))
    args.out_bwd.write_bytes(write_flo(estimate_flow(second, first, cfg)))
    _write_manifest(args.out_fwd, args, [args.first, args.second])
    return EXIT_OK


def cmd_train(args) -> int:
    triplets = load_dataset(args.data)
    if not triplets:
        raise EmptyDataset(f"no triplets under {args.data}")
    ensure_flows(triplets, cache=not args.no_flow_cache)
    stats = dataset_flow_stats(triplets)
    log.info("dataset: %d triplets, avg flow %.2f px, max %.2f px, "
             ">=21px fraction %.4f", len(triplets), stats["average_flow_px"],
             stats["max_flow_px"], stats["fraction_ge_21px"])

    cfg = TrainConfig(loss=args.loss, lr=args.lr, batch=args.batch,
                      epochs=args.epochs, crop=args.crop, seed=args.seed,
                      tau=args.tau, augment=not args.no_augment,
                      max_iterations=args.max_iterations)
    optimizer = None
    if args.resume is not None:
        model = _load_model(args.resume)
        opt_path = args.resume.with_suffix(".opt.ctxc")
        if opt_path.exists():
            optimizer = optimizer_from_container(
                read_container(opt_path.read_bytes()), model.parameters())
    else:
        model = SynthesisModel.create(seed=cfg.seed)
    if optimizer is None:
        optimizer = AdaMax(model.parameters(), lr=cfg.lr,
                           beta1=cfg.beta1, beta2=cfg.beta2)

    out: Path = args.out
    metrics_path = out.with_suffix(".metrics.csv")

    def checkpoint(epoch: int, current: SynthesisModel) -> None:
        if (epoch + 1) % max(1, args.checkpoint_every):
            return
        out.write_bytes(write_container(current.save()))

    try:
        result = train(triplets, cfg, model=model, optimizer=optimizer,
                       on_epoch_end=checkpoint)
    except TrainingAborted:
        # the loop rolled the model back to its last finite state; keep it
        out.write_bytes(write_container(model.save()))
        raise
    out.write_bytes(write_container(result.model.save()))
    out.with_suffix(".opt.ctxc").write_bytes(
        write_container(optimizer_to_container(optimizer)))
    metrics_path.write_text(metrics_csv(result.metrics))
    _write_manifest(out, args, [args.data] if args.data.is_file() else [])
    return EXIT_OK


def cmd_eval(args) -> int:
    triplets = load_dataset(args.pairs)
    if not triplets:
        raise EmptyDataset(f"no triplets under {args.pairs}")
    ensure_flows(triplets, cache=not args.no_flow_cache)
    model = _load_model(args.weights)
    examples = [EvalExample(t.source_id, t.first, t.last, t.middle,
                            t.flow_fwd, t.flow_bwd) for t in triplets]
    report = evaluate(examples, model, t=args.t, tau=args.tau,
                      with_baselines=args.with_baselines)
    args.out_csv.write_text(report.to_csv())
    print(report.summary_table())
    _write_manifest(args.out_csv, args, [args.weights])
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="ctxsyn",
                     description="Context-aware video frame interpolation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("interpolate", help="synthesize an intermediate frame")
    p.add_argument("first", type=Path)
    p.add_argument("second", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--flow-fwd", type=Path, default=None)
    p.add_argument("--flow-bwd", type=Path, default=None)
    p.add_argument("--emit-warped", action="store_true")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("flow", help="estimate bidirectional flow")
    p.add_argument("first", type=Path)
    p.add_argument("second", type=Path)
    p.add_argument("out_fwd", type=Path)
    p.add_argument("out_bwd", type=Path)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("train", help="train the synthesis network")
    p.add_argument("data", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--loss", choices=["l1", "lap", "feature-refine"],
                   default="lap")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--crop", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--resume", type=Path, default=None)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=1)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--no-flow-cache", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model against ground truth")
    p.add_argument("pairs", type=Path)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out-csv", type=Path, required=True)
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--with-baselines", action="store_true")
    p.add_argument("--no-flow-cache", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename}", file=sys.stderr)
        return EXIT_IO
    except CodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (EmptyDataset,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, NonFiniteGradient) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
