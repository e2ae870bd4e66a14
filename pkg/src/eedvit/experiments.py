"""Seeded reference experiments shared by ``scripts/`` and the acceptance tests.

Each function fixes every knob it depends on, so a result can be quoted by
(function name, seed) alone.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import generate
from .dino import DinoConfig, train
from .profiler import BottleneckSummary, EEDProfile, bottleneck, profile
from .vit import ViTConfig

# training corpus and probe set are disjoint draws of the same generator
TRAIN_IMAGES = 4096
TRAIN_DATA_SEED = 1
PROBE_IMAGES = 256
PROBE_DATA_SEED = 2


def smoke_config() -> DinoConfig:
    """One fixed 16-image batch, no warmup, no centering: a stationary objective."""
    return DinoConfig(batch_size=16, warmup_steps=0, use_centering=False)


def smoke_run(seed: int = 0, updates: int = 10) -> list[float]:
    """Losses before and after each of ``updates`` optimizer steps on one batch."""
    ds = generate("object", seed, smoke_config().batch_size)
    _, log = train(ds, ViTConfig(), smoke_config(), steps=updates + 1, seed=seed)
    return [row["loss"] for row in log]


@dataclass
class CollapseResult:
    entropy_off: float
    entropy_on: float
    log_k: float
    seconds: float
    curves: dict = field(default_factory=dict)

    @property
    def fraction_off(self) -> float:
        return self.entropy_off / self.log_k

    @property
    def fraction_on(self) -> float:
        return self.entropy_on / self.log_k


def collapse_ablation(seed: int = 0, steps: int = 200, images: int = 1024, window: int = 10) -> CollapseResult:
    """Paired runs with centering off/on; entropy is the mean over the last ``window`` steps."""
    start = time.time()
    ds = generate("object", seed, images)
    base = DinoConfig()
    ent, curves = {}, {}
    for centering in (False, True):
        _, log = train(ds, ViTConfig(), replace(base, use_centering=centering), steps=steps, seed=seed)
        curve = [row["teacher_entropy"] for row in log]
        curves[centering] = curve
        ent[centering] = float(np.mean(curve[-window:]))
    return CollapseResult(ent[False], ent[True], math.log(base.out_dim), time.time() - start, curves)


def bottleneck_configs() -> tuple[ViTConfig, DinoConfig]:
    """Desk-scale reference model and DINO settings for the bottleneck run."""
    return ViTConfig(), DinoConfig()


@dataclass
class BottleneckRun:
    kind: str
    seed: int
    steps: int
    profile: EEDProfile
    summary: BottleneckSummary
    seconds: float
    state: object = None


def bottleneck_run(kind: str, seed: int = 0, steps: int = 2000, capture_point: str = "residual", on_step=None) -> BottleneckRun:
    start = time.time()
    vit_cfg, dino_cfg = bottleneck_configs()
    state, _ = train(generate(kind, TRAIN_DATA_SEED, TRAIN_IMAGES), vit_cfg, dino_cfg, steps=steps, seed=seed,
                     on_step=on_step)
    probe = generate(kind, PROBE_DATA_SEED, PROBE_IMAGES)
    prof = profile(state, probe, probe_images=PROBE_IMAGES, seed=seed, capture_point=capture_point)
    return BottleneckRun(kind, seed, steps, prof, bottleneck(prof), time.time() - start, state)


def bottleneck_verdict(obj: BottleneckSummary, tex: BottleneckSummary) -> dict:
    """The three-part qualitative criterion, with the measured margins."""
    margin = tex.min_eed_percent - obj.min_eed_percent
    return {
        "object_u_score": obj.u_shape_score,
        "texture_u_score": tex.u_shape_score,
        "min_eed_margin": margin,
        "object_u_ok": obj.u_shape_score >= 10.0,
        "texture_flat_ok": tex.u_shape_score <= 3.0,
        "margin_ok": margin >= 15.0,
    }
