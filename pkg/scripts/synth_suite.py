"""Run registration variants on seeded synthetic pairs and write one JSON line per run.

    python scripts/synth_suite.py --seeds 0-19 --variants avsm vsvf_only --out results.jsonl
"""
import argparse
import json
import logging
import sys

from mapreg.experiments import VARIANTS, run_variant, synth_pair


def seed_range(text):
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi or lo) + 1))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0-4"))
    ap.add_argument("--variants", nargs="+", default=["avsm"], choices=sorted(VARIANTS))
    ap.add_argument("--dims", type=int, nargs="+", default=[64, 64, 64])
    ap.add_argument("--out", help="append JSON lines here (default stdout)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    sink = open(args.out, "a") if args.out else sys.stdout
    for seed in args.seeds:
        pair = synth_pair(seed, tuple(args.dims))
        for variant in args.variants:
            rec = run_variant(pair, seed, variant)
            sink.write(json.dumps(rec.to_dict()) + "\n")
            sink.flush()


if __name__ == "__main__":
    main()
