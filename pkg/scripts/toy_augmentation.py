"""Toy augmentation trend: real vs syn vs real+syn on a rotating held-out speaker.

    python3 scripts/toy_augmentation.py --out runs/toy-augmentation
"""
import argparse
import time

from emodiff.config import RunConfig
from emodiff.experiments import toy_augmentation_trend
from emodiff.protocols import write_reports


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy-augmentation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--syn-ratio", type=float, default=0.5)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    t0 = time.time()
    reports = toy_augmentation_trend(RunConfig.preset("toy"), args.seeds, args.syn_ratio, args.jobs)
    write_reports(args.out, "toy-augmentation", reports)
    for rep in reports:
        per_seed = " ".join(f"{r.uar:.3f}" for r in rep.runs)
        print(f"{rep.condition:9s} mean UAR {rep.uar_mean:.4f}  per seed {per_seed}")
    print(f"elapsed {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
