"""Toy cross-corpus adaptation: UAR on a shifted twin corpus as target data is added.

    python3 scripts/toy_cross_corpus.py --out runs/toy-cross-corpus --percentages 0 25 50 75 100
"""
import argparse
import time

from emodiff.config import RunConfig
from emodiff.experiments import toy_adaptation_trend
from emodiff.protocols import write_reports


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy-cross-corpus")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--shift", type=float, default=0.5)
    ap.add_argument("--percentages", type=float, nargs="+", default=[0, 100])
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    t0 = time.time()
    reports = toy_adaptation_trend(RunConfig.preset("toy"), args.seeds, args.shift, args.percentages, args.jobs)
    write_reports(args.out, "toy-cross-corpus", reports)
    for rep in reports:
        per_seed = " ".join(f"{r.uar:.3f}" for r in rep.runs)
        print(f"p={rep.config['percent']:g} mean UAR {rep.uar_mean:.4f}  per seed {per_seed}")
    print(f"elapsed {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
