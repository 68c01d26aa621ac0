"""``tubekit`` command-line entry point.

Exit codes: 0 success, 1 a check or run did not pass, 2 bad input.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tbf
from .bswl import heatmap_rgb, weight_map
from .config import RunConfig, as_kv, build, parse_kv, read_kv
from .errors import ParameterError, TubekitError
from .imageio import list_masks, read_mask, write_rgb
from .metrics import evaluate
from .synth import TubeSpec, spec_for_ratio, write_dataset

EXIT_OK, EXIT_FAILED, EXIT_BAD_INPUT = 0, 1, 2


@dataclasses.dataclass(frozen=True)
class GenExtras:
    """Keys a ``gen`` spec file may carry besides the generator fields."""

    count: int = 16
    fg_ratio: float | None = None  # tune tube count and widths towards this foreground fraction


def worker_count() -> int:
    raw = os.environ.get("TUBEKIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ParameterError(f"TUBEKIT_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ParameterError(f"TUBEKIT_THREADS must be a positive integer, got {raw!r}")
    return n


def ordered_map(fn, items):
    """``map`` over a thread pool sized by TUBEKIT_THREADS; results keep input order."""
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.10g}"


# --- weights ------------------------------------------------------------------


def cmd_weights(args) -> int:
    masks_dir, out = Path(args.masks), Path(args.out)
    if args.alpha < 1:
        raise ParameterError(f"--alpha must be >= 1, got {args.alpha}")
    paths = list_masks(masks_dir)
    if not paths:
        raise ParameterError(f"no .png or .pgm masks in {masks_dir}")
    out.mkdir(parents=True, exist_ok=True)

    def one(path: Path):
        try:
            wm = weight_map(read_mask(path), args.alpha, invert=args.invert_weights)
        except (OSError, ValueError) as exc:
            return path, None, str(exc)
        tbf.save(out / f"{path.stem}.wmap.tbf", wm.weights)
        write_rgb(out / f"{path.stem}.wmap.png", heatmap_rgb(wm))
        return path, wm, None

    failures = 0
    for path, wm, err in ordered_map(one, paths):
        if wm is None:
            failures += 1
            print(f"{path.name}: error: {err}", file=sys.stderr)
            continue
        w = wm.weights
        print(f"{path.stem} min={w.min():.6g} max={w.max():.6g} mean={w.mean():.6g}")
    print(f"wrote {len(paths) - failures} weight maps to {out} (alpha={args.alpha:g}, failed={failures})")
    return EXIT_BAD_INPUT if failures else EXIT_OK


# --- eval ---------------------------------------------------------------------

CONVENTIONS = {
    "empty": "IoU and Dice of two empty masks are 1",
    "assd": "inner 4-connected contours, Euclidean pixel units; undefined (nan) when either mask is empty",
    "cldice": "Zhang-Suen centrelines; a mask that thins to nothing is its own centreline",
    "means": "nan entries are excluded from the assd mean",
}


def cmd_eval(args) -> int:
    pred_dir, gt_dir, out = Path(args.pred), Path(args.gt), Path(args.out)
    preds = {p.name: p for p in list_masks(pred_dir)}
    gts = {p.name: p for p in list_masks(gt_dir)}
    names = sorted(set(preds) & set(gts))
    skipped = sorted(set(preds) ^ set(gts))
    for name in skipped:
        side = "ground truth" if name in preds else "prediction"
        print(f"warning: {name}: no matching {side}, skipped", file=sys.stderr)
    if not names:
        raise ParameterError(f"no matching mask names between {pred_dir} and {gt_dir}")

    reports = ordered_map(lambda n: evaluate(read_mask(preds[n]), read_mask(gts[n])), names)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "miou", "dice", "cldice", "assd"])
    for name, r in zip(names, reports):
        writer.writerow([name, _fmt(r.miou), _fmt(r.dice), _fmt(r.cldice), _fmt(r.assd)])
    (out / "metrics.csv").write_text(buf.getvalue())

    means = {}
    for key in ("miou", "dice", "cldice", "assd"):
        vals = [getattr(r, key) for r in reports if not math.isnan(getattr(r, key))]
        means[key] = float(np.mean(vals)) if vals else None
    summary = {
        "count": len(names),
        "means": means,
        "skipped": skipped,
        "assd_undefined": [n for n, r in zip(names, reports) if math.isnan(r.assd)],
        "conventions": CONVENTIONS,
        "columns": ["name", "miou", "dice", "cldice", "assd"],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    shown = " ".join(f"{k}={'nan' if v is None else f'{v:.6g}'}" for k, v in means.items())
    print(f"evaluated {len(names)} pairs ({len(skipped)} skipped): {shown}")
    return EXIT_OK


# --- gradcheck ----------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    report = run_suite(seed=args.seed)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_FAILED


# --- train-toy ----------------------------------------------------------------


def cmd_train_toy(args) -> int:
    from .toy import TrainingAborted, run_experiment

    kv = read_kv(args.config) if args.config else {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}")
        if value is not None:
            kv[f.name] = value
    cfg = build(RunConfig, kv)
    out = Path(cfg.out)
    try:
        results = run_experiment(cfg, out)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print((out / "comparison.csv").read_text(), end="")
    print(f"{len(results)} runs written to {out}")
    return EXIT_OK


# --- viz ----------------------------------------------------------------------


def cmd_viz(args) -> int:
    from .viz import parse_at, render

    view = render(args.ckpt, args.image, parse_at(args.at), args.out)
    print(f"L_odd={view.l_odd} L_dy={view.l_dy:.6g}; wrote sampling_points.png, attention.png, points.json to {args.out}")
    return EXIT_OK


# --- gen ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    kv = parse_kv(Path(args.spec).read_text())
    extra = build(GenExtras, {k: kv.pop(k) for k in ("count", "fg_ratio") if k in kv})
    count, ratio = extra.count, extra.fg_ratio
    if count < 1:
        raise ParameterError(f"count must be positive, got {count}")
    spec = build(TubeSpec, kv)
    if ratio is not None:
        spec = spec_for_ratio(ratio, spec)
    stems = write_dataset(args.out, spec, count)
    print(f"wrote {len(stems)} image/mask pairs to {args.out} (tubes={spec.tubes}, widths={spec.width_min}-{spec.width_max})")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tubekit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("weights", help="precompute boundary-skeleton weight maps")
    s.add_argument("--masks", required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--invert-weights", action="store_true", help="skeleton gets alpha, boundary gets 1")
    s.set_defaults(fn=cmd_weights)

    s = sub.add_parser("eval", help="mIoU, Dice, clDice and ASSD over matching mask files")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("train-toy", help="toy DSU vs bilinear experiment")
    s.add_argument("--config", help="key = value file; flags below override it")
    # values stay strings here and are typed by config.build, like file entries
    for f in dataclasses.fields(RunConfig):
        s.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f"cfg_{f.name}",
            default=None,
            metavar="V",
            help=f"(default: {as_kv(RunConfig())[f.name]})",
        )
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("viz", help="plot DSU sampling points and attention for one output pixel")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--at", required=True, help="output-resolution pixel X,Y")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_viz)

    s = sub.add_parser("gen", help="write a synthetic tube dataset")
    s.add_argument("--spec", required=True, help="key = value file of generator fields plus count")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (TubekitError, OSError) as exc:
        print(f"tubekit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
