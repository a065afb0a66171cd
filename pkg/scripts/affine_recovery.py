"""Recover purely affine synthetic warps and report the map error in voxels.

    python scripts/affine_recovery.py --seeds 0-19 --optimizer lbfgs
"""
import argparse
import time

from mapreg.affine import AffineOptConfig
from mapreg.experiments import affine_recovery


def seed_range(text):
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi or lo) + 1))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0-4"))
    ap.add_argument("--dims", type=int, nargs="+", default=[64, 64, 64])
    ap.add_argument("--optimizer", choices=["lbfgs", "gd"], default="lbfgs")
    ap.add_argument("--threshold", type=float, default=0.5, help="error in voxels counted as recovered")
    args = ap.parse_args()
    cfg = AffineOptConfig(optimizer=args.optimizer)
    t0 = time.perf_counter()
    n_ok = 0
    for seed in args.seeds:
        rec = affine_recovery(seed, tuple(args.dims), cfg)
        n_ok += rec.error_voxels < args.threshold
        print(f"seed {seed:3d}  error {rec.error_voxels:.4f} voxel  {rec.seconds:6.1f} s")
    print(f"{n_ok}/{len(args.seeds)} below {args.threshold} voxel, {time.perf_counter() - t0:.0f} s total")


if __name__ == "__main__":
    main()
