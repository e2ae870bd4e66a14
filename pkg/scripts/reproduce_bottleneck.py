"""Train the desk-scale ViT with DINO on object and texture corpora and compare EED profiles.

    python3 scripts/reproduce_bottleneck.py --out runs/bottleneck --seed 0

Writes, per corpus, a checkpoint, metrics.csv, profile.csv and profile.svg,
then comparison.txt/.csv and one manifest.json for the whole run.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import torch

from eedvit import experiments
from eedvit.cli import metrics_csv, write_manifest
from eedvit.dino import save_state
from eedvit.fileio import atomic_write_text
from eedvit.profiler import compare_profiles, export


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/bottleneck")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--capture-point", choices=("residual", "normed"), default="residual")
    args = ap.parse_args(argv)
    torch.set_num_threads(1)
    started = time.time()
    out = Path(args.out)
    runs, outputs = {}, {}
    for kind in ("object", "texture"):
        rows = []
        run = experiments.bottleneck_run(
            kind, seed=args.seed, steps=args.steps, capture_point=args.capture_point,
            on_step=lambda state, row: rows.append(row),
        )
        runs[kind] = run
        vit_cfg, dino_cfg = experiments.bottleneck_configs()
        d = out / kind
        outputs[f"{kind}_checkpoint"] = save_state(d / "checkpoint.eedc", run.state, vit_cfg, dino_cfg,
                                                   extra={"seed": args.seed, "total_steps": args.steps})
        outputs[f"{kind}_metrics"] = atomic_write_text(d / "metrics.csv", metrics_csv(rows))
        outputs[f"{kind}_csv"] = export(run.profile, d / "profile.csv", "csv")
        outputs[f"{kind}_svg"] = export(run.profile, d / "profile.svg", "svg")
        s = run.summary
        print(f"{kind:8s} EED% {[round(float(x), 1) for x in run.profile.eed_percent]}  "
              f"min {s.min_eed_percent:.1f} at L{s.argmin_layer}  U {s.u_shape_score:.1f}  ({run.seconds / 60:.1f} min)",
              flush=True)
    report = compare_profiles({k: r.profile for k, r in runs.items()})
    outputs["comparison_txt"] = atomic_write_text(out / "comparison.txt", report.to_text())
    outputs["comparison_csv"] = atomic_write_text(out / "comparison.csv", report.to_csv())
    verdict = experiments.bottleneck_verdict(runs["object"].summary, runs["texture"].summary)
    vit_cfg, dino_cfg = experiments.bottleneck_configs()
    write_manifest(out, "reproduce_bottleneck", sys.argv[1:],
                   {"vit": vit_cfg.to_dict(), "dino": dino_cfg.to_dict(), "steps": args.steps,
                    "capture_point": args.capture_point, "verdict": verdict},
                   {"seed": args.seed, "train_data_seed": experiments.TRAIN_DATA_SEED,
                    "probe_data_seed": experiments.PROBE_DATA_SEED},
                   {}, outputs, started)
    print(json.dumps(verdict, indent=1))
    return 0 if all(v for k, v in verdict.items() if k.endswith("_ok")) else 1


if __name__ == "__main__":
    sys.exit(main())
