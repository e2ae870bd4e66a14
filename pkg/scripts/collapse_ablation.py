"""Paired 200-step DINO runs with teacher centering off and on.

    python3 scripts/collapse_ablation.py --seed 0 --out runs/collapse.csv
"""

import argparse
import csv
import io
import sys

import torch

from eedvit import experiments
from eedvit.fileio import atomic_write_text


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--out", help="optional CSV of per-step teacher entropy for both arms")
    args = ap.parse_args(argv)
    torch.set_num_threads(1)
    res = experiments.collapse_ablation(seed=args.seed, steps=args.steps)
    print(f"ln K = {res.log_k:.4f}")
    print(f"centering off: entropy {res.entropy_off:.4f} nats = {res.fraction_off:.1%} of ln K")
    print(f"centering on:  entropy {res.entropy_on:.4f} nats = {res.fraction_on:.1%} of ln K")
    print(f"{res.seconds:.0f}s")
    if args.out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "entropy_centering_off", "entropy_centering_on"])
        for i, (a, b) in enumerate(zip(res.curves[False], res.curves[True]), 1):
            w.writerow([i, f"{a:.9g}", f"{b:.9g}"])
        atomic_write_text(args.out, buf.getvalue())
    return 0 if res.fraction_off < 0.25 and res.fraction_on > 0.5 else 1


if __name__ == "__main__":
    sys.exit(main())
