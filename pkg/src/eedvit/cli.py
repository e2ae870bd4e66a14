"""Command-line entry point: ``eedvit synth | train | profile | compare``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
writes its outputs atomically into one run directory together with a single
``manifest.json``.

Seeds: each command takes one ``--seed``. ``train`` derives the model
initialization seed from ``SeedSequence(seed)`` and draws each step's batch
and augmentations from ``default_rng([seed, 0xD1A0, step])``; ``profile``
picks probe images with ``default_rng([seed, 0x9B0BE])``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import EEDError

MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.eedc"
METRICS = "metrics.csv"
METRIC_COLUMNS = ("step", "loss", "teacher_entropy", "lr")


class UsageError(Exception):
    """Bad arguments detected after argparse (exit code 2)."""


def write_manifest(out_dir: Path, command: str, argv, config: dict, seeds: dict, inputs: dict, outputs: dict,
                   started: float) -> Path:
    from .fileio import atomic_write_text

    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "started_unix": round(started, 3),
        "duration_s": round(time.time() - started, 3),
    }
    return atomic_write_text(out_dir / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------- synth


def cmd_synth(args, argv) -> int:
    from .data import generate, save_dataset

    if args.n <= 0:
        raise UsageError(f"--n must be positive, got {args.n}")
    if args.size <= 0:
        raise UsageError(f"--size must be positive, got {args.size}")
    started = time.time()
    ds = generate(args.kind, args.seed, args.n, args.size)
    out = Path(args.out)
    save_dataset(ds, out, extra={"kind": args.kind, "seed": args.seed})
    files = {name: out / name for name in ("images.npy", "labels.npy", "masks.npy", "dataset.txt") if (out / name).exists()}
    write_manifest(out, "synth", argv, {"kind": args.kind, "n": args.n, "size": args.size}, {"seed": args.seed},
                   {}, files, started)
    return 0


# --------------------------------------------------------------------- train


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["step"], f"{r['loss']:.9g}", f"{r['teacher_entropy']:.9g}", f"{r['lr']:.9g}"])
    return buf.getvalue()


def cmd_train(args, argv) -> int:
    from .data import load_dataset
    from .dino import DinoConfig, format_train_config, init_state, load_state, parse_train_config, save_state, train
    from .fileio import atomic_write_text
    from .vit import ViTConfig

    if args.epochs is not None and args.steps is not None:
        raise UsageError("give --epochs or --steps, not both")
    if (args.epochs is not None and args.epochs < 0) or (args.steps is not None and args.steps < 0):
        raise UsageError("--epochs/--steps must be non-negative")
    started = time.time()
    train_opts: dict = {}
    if args.resume:
        state, vit_cfg, dino_cfg, ck_config = load_state(args.resume)
        seed = int(ck_config.get("seed", args.seed)) if args.seed is None else args.seed
        total = ck_config.get("total_steps")
    else:
        if args.config:
            vit_cfg, dino_cfg, train_opts = parse_train_config(Path(args.config).read_text(), str(args.config))
        else:
            vit_cfg, dino_cfg = ViTConfig(), DinoConfig()
        seed = 0 if args.seed is None else args.seed
        state, total = None, None
    dataset = load_dataset(args.data)
    epochs = args.epochs
    steps = args.steps
    if epochs is None and steps is None:
        if "steps" in train_opts:
            steps = int(train_opts["steps"])
        else:
            epochs = float(train_opts.get("epochs", 1))
    if state is None:
        seeds = np.random.SeedSequence(seed).generate_state(1)
        state = init_state(vit_cfg, dino_cfg, seed=int(seeds[0]) % (2**31))
    out = Path(args.out)
    state, log = train(dataset, vit_cfg, dino_cfg, epochs=epochs, steps=steps, seed=seed, state=state,
                       total_steps=total, diagnostic_dir=out)
    total = total or state.step
    save_state(out / CHECKPOINT, state, vit_cfg, dino_cfg, extra={"seed": seed, "total_steps": total})
    atomic_write_text(out / METRICS, metrics_csv(log))
    write_manifest(
        out, "train", argv,
        {"vit": vit_cfg.to_dict(), "dino": dino_cfg.to_dict(), "config_text": format_train_config(vit_cfg, dino_cfg, train_opts),
         "steps_run": len(log), "final_step": state.step},
        {"seed": seed, "init_seed_rule": "SeedSequence(seed)", "step_rng_rule": "default_rng([seed, 0xD1A0, step])"},
        {"data": args.data, "config": args.config or "", "resume": args.resume or ""},
        {"checkpoint": out / CHECKPOINT, "metrics": out / METRICS},
        started,
    )
    return 0


# ------------------------------------------------------------------- profile


def cmd_profile(args, argv) -> int:
    from .data import read_dump, write_dump
    from .profiler import capture_activations, export, probe_indices, profile_from_activations

    if args.probe_images <= 0:
        raise UsageError("--probe-images must be positive")
    started = time.time()
    out = Path(args.out)
    centered, include_cls = not args.uncentered, not args.exclude_cls
    inputs: dict = {}
    if args.from_dump:
        header, acts = read_dump(args.from_dump)
        config_hash, dataset_name = header["config_hash"], args.dataset_name or "dump"
        inputs["dump"] = args.from_dump
        config = {"dump_header": {k: v for k, v in header.items()}}
    else:
        if not args.checkpoint or not args.data:
            raise UsageError("--checkpoint and --data are required unless --from-dump is given")
        from .data import load_dataset
        from .dino import load_state

        if not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        state, vit_cfg, _dino_cfg, _ = load_state(args.checkpoint)
        dataset = load_dataset(args.data)
        idx = probe_indices(len(dataset), args.probe_images, args.seed)
        acts = capture_activations(state, dataset.images[idx], capture_point=args.capture_point)
        config_hash, dataset_name = vit_cfg.config_hash(), args.dataset_name or dataset.source
        inputs.update(checkpoint=args.checkpoint, data=args.data)
        config = {"vit": vit_cfg.to_dict()}
    prof = profile_from_activations(
        acts, centered=centered, include_cls=include_cls, method=args.method,
        config_hash=config_hash, dataset=dataset_name, capture_point=args.capture_point,
    )
    outputs = {"csv": out / "profile.csv", "svg": out / "profile.svg"}
    if args.write_dump:
        outputs["dump"] = write_dump(out / "activations.eed", acts, config_hash)
    export(prof, outputs["csv"], "csv")
    export(prof, outputs["svg"], "svg")
    config.update(centered=centered, include_cls=include_cls, capture_point=args.capture_point,
                  probe_images=args.probe_images, method=args.method)
    write_manifest(out, "profile", argv, config, {"seed": args.seed, "probe_rule": "default_rng([seed, 0x9B0BE])"},
                   inputs, outputs, started)
    return 0


# ------------------------------------------------------------------- compare


def cmd_compare(args, argv) -> int:
    from .fileio import atomic_write_text
    from .profiler import compare_profiles, read_profile_csv

    if len(args.profiles) < 2:
        raise UsageError("compare needs at least two profile CSVs")
    started = time.time()
    curves, sources = {}, {}
    for path in args.profiles:
        meta, rows = read_profile_csv(path)
        name = meta.get("dataset") or Path(path).parent.name or Path(path).stem
        if name in curves:
            name = f"{name} ({path})"
        curves[name] = [r["eed_percent"] for r in rows]
        sources[name] = path
    lengths = {sources[n]: len(c) for n, c in curves.items()}
    if len(set(lengths.values())) > 1:
        desc = ", ".join(f"{p} has {k} layers" for p, k in lengths.items())
        raise EEDError(f"layer counts differ: {desc}")
    report = compare_profiles(curves)
    out = Path(args.out)
    outputs = {"text": out / "comparison.txt", "csv": out / "comparison.csv"}
    atomic_write_text(outputs["text"], report.to_text())
    atomic_write_text(outputs["csv"], report.to_csv())
    write_manifest(out, "compare", argv, {"order": report.order}, {},
                   {f"profile{i}": p for i, p in enumerate(args.profiles)}, outputs, started)
    if not args.quiet:
        sys.stdout.write(report.to_text())
    return 0


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eedvit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"eedvit {__version__}")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic texture or object corpus")
    s.add_argument("--kind", choices=("texture", "object"), required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="DINO-train a ViT and write a checkpoint and metrics")
    t.add_argument("--config", help="flat key = value training config")
    t.add_argument("--data", required=True, help="dataset directory or CIFAR-100 binary")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    f = sub.add_parser("profile", help="layer-wise EED profile of a checkpoint")
    f.add_argument("--checkpoint")
    f.add_argument("--data")
    f.add_argument("--out", required=True)
    f.add_argument("--uncentered", action="store_true", help="use the uncentered second moment")
    f.add_argument("--exclude-cls", action="store_true", help="drop the CLS token from the pooled tokens")
    f.add_argument("--probe-images", type=int, default=256)
    f.add_argument("--capture-point", choices=("residual", "normed"), default="residual")
    f.add_argument("--method", choices=("jacobi", "lapack"), default="jacobi")
    f.add_argument("--from-dump", help="profile a saved activation dump instead of a live model")
    f.add_argument("--write-dump", action="store_true", help="also save the captured activations")
    f.add_argument("--dataset-name", help="label for reports (default: dataset source)")
    f.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("compare", help="rank profiles by minimum EED%%")
    c.add_argument("profiles", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--quiet", action="store_true")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "profile": cmd_profile, "compare": cmd_compare}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("eedvit: error: --threads must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.threads)
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"eedvit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (EEDError, OSError, ValueError, KeyError) as exc:
        print(f"eedvit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
