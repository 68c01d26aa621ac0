"""DSU vs bilinear and BSWL vs uniform on synthetic tubes.

Runs the stride table (dynamic and fixed strides, bilinear baseline) and a
uniform-weight DSU run with the same seeds, then prints both comparisons.

    python scripts/run_toy_experiment.py [--config configs/toy.cfg] [--out runs/toy]
"""

import argparse
import dataclasses
import logging
import statistics
import time
from pathlib import Path

from tubekit.config import RunConfig, build, read_kv
from tubekit.toy import run_experiment


def median(results, name, key):
    vals = [getattr(r, key) for r in results if r.variant.name == name]
    return statistics.median(vals) if vals else float("nan")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "toy.cfg"))
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = build(RunConfig, read_kv(args.config))
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    out = Path(cfg.out)

    t0 = time.perf_counter()
    table = run_experiment(cfg, out / "strides")
    secs = time.perf_counter() - t0
    uni_cfg = dataclasses.replace(cfg, upsampler=("dsu",), stride=("dynamic",), loss=("uniform",))
    uniform = run_experiment(uni_cfg, out / "uniform")

    names = list(dict.fromkeys(r.variant.name for r in table))
    print(f"\nstride table ({secs:.0f}s)")
    print(f"{'variant':<22}{'val loss':>10}{'mIoU':>8}{'clDice':>8}{'ASSD':>8}")
    for n in names:
        print(f"{n:<22}{median(table, n, 'val_loss'):>10.4f}{median(table, n, 'miou'):>8.4f}"
              f"{median(table, n, 'cldice'):>8.4f}{median(table, n, 'assd'):>8.4f}")
    dsu = sorted((r for r in table if r.variant.name == "dsu-dynamic-bswl"), key=lambda r: r.seed)
    bil = sorted((r for r in table if r.variant.upsampler == "bilinear"), key=lambda r: r.seed)
    wins = sum(d.val_loss < b.val_loss for d, b in zip(dsu, bil))
    print(f"DSU beats bilinear in {wins}/{len(dsu)} seeds")

    print("\nloss switch (DSU, dynamic stride)")
    both = table + uniform
    for n in ("dsu-dynamic-bswl", "dsu-dynamic-uniform"):
        print(f"{n:<22} clDice {median(both, n, 'cldice'):.4f}  ASSD {median(both, n, 'assd'):.4f}")


if __name__ == "__main__":
    main()
