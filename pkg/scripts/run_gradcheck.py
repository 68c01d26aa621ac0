"""Run the finite-difference battery over several seeds and report the worst error per check.

    python scripts/run_gradcheck.py --seeds 0 1 2 3 4
"""

import argparse
import sys

from tubekit.gradsuite import run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()
    worst: dict[str, float] = {}
    ok = True
    for seed in args.seeds:
        report = run_suite(seed=seed)
        ok &= report.passed
        for r in report.results:
            worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    for name, err in worst.items():
        print(f"{name:<26} worst={err:.3e}")
    print(f"{len(args.seeds)} seeds: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
