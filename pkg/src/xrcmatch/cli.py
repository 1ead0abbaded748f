"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import _kernels
from .corr4d import DEFAULT_MEMORY_BUDGET
from .evaluation import (
    DEFAULT_THRESHOLDS,
    DatasetError,
    bias_histogram,
    evaluate_pairs,
    load_pairs,
    mma_csv,
    read_ratios,
    resolution_sweep,
    summarize,
)
from .features import FeatureFormatError, compute_pyramid, read_features, write_features
from .imgio import MIN_LONG_SIDE, ImageError, ResizeSpec, load_image, resize_bilinear, to_grayscale
from .matcher import (
    DEFAULT_RESOLUTION,
    DEFAULT_TOPK,
    HEATMAP_STAGES,
    PipelineConfig,
    export_heatmap,
    match_pair,
    match_pyramids,
    query_stage_maps,
)
from .mmfilter import DEFAULT_EPSILON, DEFAULT_PASSES, MMConfig

log = logging.getLogger("xrcmatch")

_RUNTIME_ERRORS = (ImageError, FeatureFormatError, DatasetError, OSError, ValueError, MemoryError, IndexError)


def _resolution(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid resolution {text!r}") from None
    if v < MIN_LONG_SIDE:
        raise argparse.ArgumentTypeError(f"resolution below minimum ({v} < {MIN_LONG_SIDE})")
    return v


def _resolutions(text: str) -> list[int]:
    return [_resolution(t) for t in text.split(",") if t.strip()]


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _thresholds(text: str) -> tuple[int, ...]:
    try:
        if ".." in text:
            lo, hi = text.split("..")
            out = tuple(range(int(lo), int(hi) + 1))
        else:
            out = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid thresholds {text!r}") from None
    if not out or any(b <= a for a, b in zip(out, out[1:])) or out[0] < 0:
        raise argparse.ArgumentTypeError("thresholds must be ascending and non-negative")
    return out


def _point(text: str) -> tuple[float, float]:
    try:
        x, y = (float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}") from None
    return x, y


def _default_threads() -> int:
    env = os.environ.get("XRC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _pipeline_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline")
    g.add_argument("--resolution", type=_resolution, default=DEFAULT_RESOLUTION,
                   help="long side of the resampled input images, in pixels")
    g.add_argument("--topk", type=_positive_int, default=DEFAULT_TOPK, help="number of matches to keep")
    g.add_argument("--mm-passes", type=_positive_int, default=DEFAULT_PASSES,
                   help="number of mutual-matching passes")
    g.add_argument("--epsilon", type=_positive_float, default=DEFAULT_EPSILON,
                   help="stabiliser added to the mutual-matching maxima")
    g.add_argument("--memory-budget-mb", type=_positive_float, default=DEFAULT_MEMORY_BUDGET / 2**20,
                   help="memory budget for the 4D correlation tensor, in MiB")
    g.add_argument("--threads", type=_positive_int, default=_default_threads(),
                   help="worker threads (env XRC_THREADS overrides the hardware default)")
    return p


def _config(args, resolution: int | None = None) -> PipelineConfig:
    return PipelineConfig(
        resolution=ResizeSpec(resolution or args.resolution),
        mm=MMConfig(args.epsilon, args.mm_passes),
        topk=args.topk,
        memory_budget=max(1, int(args.memory_budget_mb * 2**20)),
        threads=args.threads,
    )


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="xrcmatch", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _pipeline_options()

    p = sub.add_parser("match", parents=[common], formatter_class=fmt, help="match two images, write TSV")
    p.add_argument("--src", help="source image (PGM/PPM/PNG)")
    p.add_argument("--tgt", help="target image (PGM/PPM/PNG)")
    p.add_argument("--src-features", help="XFM1 feature file used instead of the built-in descriptor")
    p.add_argument("--tgt-features", help="XFM1 feature file used instead of the built-in descriptor")
    p.add_argument("--out", default="-", help="output TSV path ('-' for stdout)")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="MMA on an HPatches-layout dataset")
    p.add_argument("--dataset", required=True, help="directory of sequence folders (i_*, v_*)")
    p.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS,
                   help="pixel thresholds, 'lo..hi' or comma list (default 1..10)")
    p.add_argument("--out", help="MMA CSV path (one row per threshold)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], formatter_class=fmt, help="AUC versus input resolution")
    p.add_argument("--dataset", required=True, help="directory of sequence folders")
    p.add_argument("--resolutions", type=_resolutions, required=True, help="ascending comma list, e.g. 720,1600")
    p.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS,
                   help="pixel thresholds, 'lo..hi' or comma list (default 1..10)")
    p.add_argument("--out", default="-", help="sweep CSV path ('-' for stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("heatmap", parents=[common], formatter_class=fmt, help="export a correlation map as PGM")
    p.add_argument("--src", required=True, help="source image")
    p.add_argument("--tgt", required=True, help="target image")
    p.add_argument("--query", type=_point, required=True, help="query point X,Y in source pixels")
    p.add_argument("--stage", choices=HEATMAP_STAGES, default="mm2", help="pipeline stage to visualise")
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("bias", formatter_class=fmt, help="cherry-picking bias histogram")
    p.add_argument("--a", required=True, help="per-pair correct-match ratios of the positive method")
    p.add_argument("--b", required=True, help="per-pair correct-match ratios of the negative method")
    p.add_argument("--tau", type=float, default=0.75, help="positive threshold tau+")
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("features", formatter_class=fmt, help="export or inspect XFM1 feature files")
    fsub = p.add_subparsers(dest="action", required=True)
    e = fsub.add_parser("export", formatter_class=fmt, help="compute and write a feature pyramid")
    e.add_argument("--image", required=True, help="input image")
    e.add_argument("--resolution", type=_resolution, default=DEFAULT_RESOLUTION,
                   help="long side of the resampled image, in pixels")
    e.add_argument("--out", required=True, help="output XFM1 path")
    e.set_defaults(func=cmd_features_export)
    i = fsub.add_parser("import", formatter_class=fmt, help="validate an XFM1 file and print its layout")
    i.add_argument("--in", dest="path", required=True, help="XFM1 file")
    i.set_defaults(func=cmd_features_import)
    return parser


def _write_text(text: str, path: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)


# -- commands -------------------------------------------------------------


def cmd_match(args, parser) -> int:
    for side in ("src", "tgt"):
        if getattr(args, side) is None and getattr(args, f"{side}_features") is None:
            parser.error(f"the following arguments are required: --{side}")
    cfg = _config(args)
    if args.src_features or args.tgt_features:
        pyrs, scales = [], []
        for side in ("src", "tgt"):
            feat_path, img_path = getattr(args, f"{side}_features"), getattr(args, side)
            if feat_path:
                pyr = read_features(feat_path)
                if img_path:
                    img = load_image(img_path)
                    w, h = pyr.source_dims
                    scales.append((img.width / w, img.height / h))
                else:
                    scales.append((1.0, 1.0))
            else:
                gray = to_grayscale(load_image(img_path))
                resized, sx, sy = resize_bilinear(gray, cfg.resolution)
                pyr = compute_pyramid(resized)
                scales.append((sx, sy))
            pyrs.append(pyr)
        result = match_pyramids(pyrs[0], pyrs[1], cfg, scales[0], scales[1])
    else:
        result = match_pair(load_image(args.src), load_image(args.tgt), cfg)
    log.info("%d matches", len(result))
    _write_text(result.to_tsv(), args.out)
    return 0


def cmd_eval(args, parser) -> int:
    cfg = _config(args)
    pairs = load_pairs(args.dataset)
    reports = evaluate_pairs(pairs, cfg, args.thresholds)
    summary = summarize(reports)
    table = mma_csv(summary)
    if args.out:
        _write_text(table, args.out)
    for cat, key in (("illumination", "auc_illum"), ("viewpoint", "auc_view"), ("overall", "auc_all")):
        rep = summary[cat]
        value = "nan" if rep is None or not rep.valid else f"{rep.auc:.4f}"
        print(f"{key},{value}")
    return 0


def cmd_sweep(args, parser) -> int:
    if not args.resolutions:
        parser.error("--resolutions must not be empty")
    cfg = _config(args)
    pairs = load_pairs(args.dataset)
    table = resolution_sweep(pairs, args.resolutions, cfg, args.thresholds)
    _write_text(table.to_csv(), args.out)
    return 0


def cmd_heatmap(args, parser) -> int:
    cfg = _config(args)
    _kernels.set_threads(cfg.threads)
    maps = query_stage_maps(load_image(args.src), load_image(args.tgt), args.query, cfg)
    export_heatmap(maps[args.stage], args.out)
    return 0


def cmd_bias(args, parser) -> int:
    hist = bias_histogram(read_ratios(args.a), read_ratios(args.b), args.tau)
    _write_text(hist.to_text(), args.out)
    return 0


def cmd_features_export(args, parser) -> int:
    gray = to_grayscale(load_image(args.image))
    resized, _, _ = resize_bilinear(gray, ResizeSpec(args.resolution))
    write_features(compute_pyramid(resized), args.out)
    return 0


def cmd_features_import(args, parser) -> int:
    pyr = read_features(args.path)
    f, c = pyr.fine, pyr.coarse
    print(f"image {pyr.source_dims[0]}x{pyr.source_dims[1]}")
    print(f"fine {f.grid_w}x{f.grid_h}x{f.channels} stride {f.stride}")
    print(f"coarse {c.grid_w}x{c.grid_h}x{c.channels} stride {c.stride}")
    zero = int(np.sum(~np.any(c.data > 0, axis=-1)))
    print(f"coarse zero cells {zero}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args, parser)
    except _RUNTIME_ERRORS as exc:
        print(f"xrcmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
