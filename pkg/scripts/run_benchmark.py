#!/usr/bin/env python3
"""Simulation benchmark: fit all four models on the four-cluster generator
and report test MSPE (the MSPE-comparison experiment)."""

import argparse
import time
from pathlib import Path

from gtimm import FitConfig, benchmark, simulate_gtimm


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sigma-b2", type=float, default=2.0)
    ap.add_argument("--sigma-eps2", type=float, default=1.0)
    ap.add_argument("--max-leaves", default="cv")
    ap.add_argument("--train-fraction", type=float, default=0.8)
    ap.add_argument("--out", default=None, help="optional CSV path for the report")
    args = ap.parse_args()

    d, _ = simulate_gtimm(args.n, args.seed, args.sigma_b2, args.sigma_eps2)
    max_leaves = args.max_leaves if args.max_leaves == "cv" else int(args.max_leaves)
    cfg = FitConfig(max_leaves=max_leaves, seed=args.seed)
    t0 = time.time()
    report = benchmark(d, cfg, args.train_fraction, args.seed)
    elapsed = time.time() - t0

    print(f"N={args.n}  train/test={report.n_train}/{report.n_test}  ({elapsed:.1f}s)")
    print(f"{'model':<8}{'test MSPE':>12}")
    for name, value in sorted(report.mspe.items(), key=lambda kv: kv[1]):
        print(f"{name:<8}{value:>12.3f}")
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("model,mspe\n")
            for name, value in report.mspe.items():
                fh.write(f"{name},{value!r}\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
