"""DINO self-distillation: multi-crop views, student/teacher, centering, EMA."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import ImageDataset
from .errors import NonFiniteLoss, ShapeMismatch
from .fileio import atomic_write_text
from .vit import ops
from .vit.model import ViT, ViTConfig, _trunc_normal_


@dataclass
class DinoConfig:
    out_dim: int = 256
    head_hidden: int = 256
    head_bottleneck: int = 64
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    teacher_momentum: float = 0.996
    center_momentum: float = 0.9
    use_centering: bool = True
    num_local_crops: int = 2
    global_crop_scale: tuple[float, float] = (0.4, 1.0)
    local_crop_scale: tuple[float, float] = (0.1, 0.4)
    local_crop_size: int = 16
    color_jitter: float = 0.1
    batch_size: int = 32
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_steps: int = 50
    weight_decay: float = 0.04
    clip_grad: float = 3.0

    def __post_init__(self):
        self.global_crop_scale = tuple(self.global_crop_scale)
        self.local_crop_scale = tuple(self.local_crop_scale)
        if not 0 < self.teacher_temp < self.student_temp:
            raise ValueError("need 0 < teacher_temp < student_temp")
        for name in ("teacher_momentum", "center_momentum"):
            m = getattr(self, name)
            if not 0 < m < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {m}")

    @classmethod
    def full_scale(cls) -> DinoConfig:
        return cls(out_dim=4096, head_hidden=2048, head_bottleneck=256, num_local_crops=4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global_crop_scale"] = list(self.global_crop_scale)
        d["local_crop_scale"] = list(self.local_crop_scale)
        return d


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(","))
    return raw


def parse_train_config(text: str, source: str = "<config>") -> tuple[ViTConfig, DinoConfig, dict]:
    """Parse the flat ``section.key = value`` training config.

    Sections are ``vit`` (ViTConfig fields), ``dino`` (DinoConfig fields) and
    ``train`` (free-form run options returned as strings). Blank lines and
    ``#`` comments are ignored; unknown keys are errors.
    """
    targets = {"vit": (ViTConfig, {}), "dino": (DinoConfig, {})}
    train_opts: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        section, _, name = key.partition(".")
        if not sep or not name:
            raise ValueError(f"{source}:{lineno}: expected 'section.key = value', got {line!r}")
        if section == "train":
            train_opts[name] = raw
            continue
        if section not in targets:
            raise ValueError(f"{source}:{lineno}: unknown section {section!r}")
        cls, values = targets[section]
        defaults = {f.name: f.default for f in fields(cls)}
        if name not in defaults:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[name] = _parse_value(raw, defaults[name])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {key}: {exc}") from None
    return ViTConfig(**targets["vit"][1]), DinoConfig(**targets["dino"][1]), train_opts


def format_train_config(vit_cfg: ViTConfig, dino_cfg: DinoConfig, train_opts: dict | None = None) -> str:
    lines = []
    for section, cfg in (("vit", vit_cfg), ("dino", dino_cfg)):
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"{section}.{f.name} = {v}")
    lines += [f"train.{k} = {v}" for k, v in (train_opts or {}).items()]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ networks


class DinoHead(nn.Module):
    """Three-layer GELU MLP, L2-normalized bottleneck, weight-normalized output layer."""

    def __init__(self, in_dim: int, cfg: DinoConfig, fused: bool = True):
        super().__init__()
        self.fused = fused
        h, b = cfg.head_hidden, cfg.head_bottleneck
        self.fc1_weight = nn.Parameter(torch.zeros(h, in_dim))
        self.fc1_bias = nn.Parameter(torch.zeros(h))
        self.fc2_weight = nn.Parameter(torch.zeros(h, h))
        self.fc2_bias = nn.Parameter(torch.zeros(h))
        self.fc3_weight = nn.Parameter(torch.zeros(b, h))
        self.fc3_bias = nn.Parameter(torch.zeros(b))
        self.last_weight = nn.Parameter(torch.zeros(cfg.out_dim, b))

    def reset_parameters(self, gen: torch.Generator, std: float = 0.02):
        for name, p in self.named_parameters():
            if name.endswith("weight"):
                _trunc_normal_(p, std, gen)

    def forward(self, x):
        k = ops.kernels(self.fused)
        x = k.gelu(k.linear(x, self.fc1_weight, self.fc1_bias))
        x = k.gelu(k.linear(x, self.fc2_weight, self.fc2_bias))
        x = ops.l2_normalize(k.linear(x, self.fc3_weight, self.fc3_bias))
        # weight-normalized output layer: each logit is a cosine in [-1, 1]
        return ops.linear(x, ops.l2_normalize(self.last_weight))


class DinoNet(nn.Module):
    def __init__(self, vit_cfg: ViTConfig, dino_cfg: DinoConfig, seed: int = 0):
        super().__init__()
        self.backbone = ViT(vit_cfg, seed=seed)
        self.head = DinoHead(vit_cfg.embed_dim, dino_cfg, fused=vit_cfg.fused_kernels)
        self.head.reset_parameters(torch.Generator().manual_seed(seed + 1), vit_cfg.init_std)

    def forward(self, images):
        return self.head(self.backbone.cls_features(images))


@dataclass
class DinoState:
    student: DinoNet
    teacher: DinoNet
    center: torch.Tensor
    step: int = 0
    optimizer: torch.optim.Optimizer | None = None

    def __post_init__(self):
        for (ns, ps), (nt, pt) in zip(self.student.named_parameters(), self.teacher.named_parameters()):
            if ns != nt or ps.shape != pt.shape:
                raise ShapeMismatch(f"student/teacher mismatch at {ns} vs {nt}")


def init_state(vit_cfg: ViTConfig, dino_cfg: DinoConfig, seed: int = 0) -> DinoState:
    student = DinoNet(vit_cfg, dino_cfg, seed=seed)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    state = DinoState(student, teacher, torch.zeros(dino_cfg.out_dim), 0)
    state.optimizer = make_optimizer(student, dino_cfg)
    return state


def make_optimizer(student: nn.Module, cfg: DinoConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in student.named_parameters():
        # biases, norms and token/position embeddings are not decayed
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("bias") or leaf.startswith("norm") or leaf in ("pos_embed", "cls_token", "cls_pos"):
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


# --------------------------------------------------------------- multi-crop


def random_resized_crop(rng: np.random.Generator, height: int, width: int, scale, ratio=(3 / 4, 4 / 3)):
    """Sample a (top, left, h, w) rectangle inside the image."""
    area = height * width
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fall back to a centred square of the largest admissible side
    side = max(1, min(height, width, int(round(math.sqrt(area * scale[1])))))
    return (height - side) // 2, (width - side) // 2, side, side


def _resize(patch: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(patch.transpose(2, 0, 1)))[None].float()
    t = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t[0].numpy().transpose(1, 2, 0)


def _augment(view: np.ndarray, rng: np.random.Generator, jitter: float) -> np.ndarray:
    if rng.random() < 0.5:
        view = view[:, ::-1]
    if jitter > 0:
        view = view * (1.0 + rng.uniform(-jitter, jitter, size=3))
    return np.clip(view, 0.0, 1.0)


def multi_crop(image: np.ndarray, rng: np.random.Generator, cfg: DinoConfig, global_size: int | None = None):
    """Two global views at model resolution plus ``cfg.num_local_crops`` local views.

    Returns ``(views, rects)`` where each rect is ``(top, left, h, w)`` in
    source-image pixels.
    """
    hgt, wid = image.shape[:2]
    gsize = global_size or hgt
    views, rects = [], []
    for i in range(2 + cfg.num_local_crops):
        is_global = i < 2
        scale = cfg.global_crop_scale if is_global else cfg.local_crop_scale
        top, left, h, w = random_resized_crop(rng, hgt, wid, scale)
        crop = image[top : top + h, left : left + w]
        view = _resize(crop, gsize if is_global else cfg.local_crop_size)
        views.append(_augment(view, rng, cfg.color_jitter).astype(np.float32))
        rects.append((top, left, h, w))
    return views, rects


def make_batch(images: np.ndarray, rng: np.random.Generator, cfg: DinoConfig):
    """Multi-crop a batch; returns one (B, 3, S, S) tensor per view slot."""
    per_image = [multi_crop(img, rng, cfg)[0] for img in images]
    slots = []
    for v in range(2 + cfg.num_local_crops):
        stack = np.stack([views[v] for views in per_image])
        slots.append(torch.from_numpy(np.ascontiguousarray(stack.transpose(0, 3, 1, 2))))
    return slots


# --------------------------------------------------------------------- loss


def teacher_probs(teacher_logits: torch.Tensor, center: torch.Tensor | None, temp: float) -> torch.Tensor:
    z = teacher_logits.detach()
    if center is not None:
        z = z - center
    return ops.softmax(z / temp, dim=-1)


def dino_loss(student_outputs, teacher_outputs, cfg: DinoConfig, center: torch.Tensor | None) -> torch.Tensor:
    """Cross-entropy of teacher global views against every other student view.

    ``student_outputs`` is a list of (B, K) logits for all views, global views
    first; ``teacher_outputs`` the (B, K) logits of the two global views.
    Averaged over (teacher view, student view) pairs.
    """
    k = student_outputs[0].shape[-1]
    for t in list(student_outputs) + list(teacher_outputs):
        if t.shape[-1] != k:
            raise ShapeMismatch(f"head widths differ: {t.shape[-1]} vs {k}")
    if center is not None and center.shape[-1] != k:
        raise ShapeMismatch(f"center width {center.shape[-1]} vs head width {k}")
    targets = [teacher_probs(t, center, cfg.teacher_temp) for t in teacher_outputs]
    total, pairs = 0.0, 0
    for iq, q in enumerate(targets):
        for v, s in enumerate(student_outputs):
            if v == iq:
                continue
            total = total + ops.cross_entropy(q, s / cfg.student_temp).mean()
            pairs += 1
    return total / pairs


def loss_pairs(num_teacher_views: int, num_student_views: int) -> list[tuple[int, int]]:
    return [(t, s) for t in range(num_teacher_views) for s in range(num_student_views) if s != t]


@torch.no_grad()
def teacher_ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> nn.Module:
    """theta_t <- m * theta_t + (1 - m) * theta_s, in place."""
    for pt, ps in zip(teacher.parameters(), student.parameters()):
        if pt.shape != ps.shape:
            raise ShapeMismatch(f"teacher {tuple(pt.shape)} vs student {tuple(ps.shape)}")
        pt.mul_(momentum).add_(ps.detach(), alpha=1.0 - momentum)
    return teacher


@torch.no_grad()
def center_update(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    if teacher_logits.shape[0] == 0:
        raise ValueError("empty teacher batch")
    return center * momentum + teacher_logits.detach().mean(dim=0) * (1.0 - momentum)


def distribution_entropy(p: torch.Tensor) -> torch.Tensor:
    """Row-wise entropy in nats, 0 log 0 = 0."""
    logp = torch.log(torch.where(p > 0, p, torch.ones_like(p)))
    return -(p * logp).sum(dim=-1)


def teacher_entropy(teacher_logits: torch.Tensor, center: torch.Tensor | None, temp: float) -> float:
    """Entropy of the batch-averaged teacher distribution (collapse monitor).

    It falls to 0 when every image is sent to the same output dimension and
    reaches ln K when the batch spreads evenly over all K dimensions.
    """
    p = teacher_probs(teacher_logits, center, temp).mean(dim=0)
    return float(distribution_entropy(p))


# -------------------------------------------------------------------- train


def learning_rate(step: int, total: int, cfg: DinoConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, total - cfg.warmup_steps)
    t = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * t))


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator so a resumed run draws the same batches."""
    return np.random.default_rng([seed, 0xD1A0, step])


def train_step(state: DinoState, images: np.ndarray, dino_cfg: DinoConfig, lr: float, rng: np.random.Generator):
    slots = make_batch(images, rng, dino_cfg)
    student, teacher = state.student, state.teacher
    globals_ = torch.cat(slots[:2])
    with torch.no_grad():
        t_out = teacher(globals_)
    s_out = list(student(globals_).chunk(2))
    if dino_cfg.num_local_crops:
        s_out += list(student(torch.cat(slots[2:])).chunk(dino_cfg.num_local_crops))
    t_chunks = list(t_out.chunk(2))
    center = state.center if dino_cfg.use_centering else None
    loss = dino_loss(s_out, t_chunks, dino_cfg, center)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss became {float(loss.detach())} at step {state.step}")
    opt = state.optimizer
    for g in opt.param_groups:
        g["lr"] = lr
    opt.zero_grad(set_to_none=True)
    ops.backward(loss)
    if dino_cfg.clip_grad:
        torch.nn.utils.clip_grad_norm_(student.parameters(), dino_cfg.clip_grad)
    opt.step()
    teacher_ema_update(teacher, student, dino_cfg.teacher_momentum)
    ent = teacher_entropy(t_out, center, dino_cfg.teacher_temp)
    if dino_cfg.use_centering:
        state.center = center_update(state.center, t_out, dino_cfg.center_momentum)
    state.step += 1
    return float(loss.detach()), ent


def _diagnostic_dump(path: Path, state: DinoState, exc: Exception):
    norms = {n: float(p.detach().norm()) for n, p in state.student.named_parameters()}
    atomic_write_text(path, json.dumps({"step": state.step, "error": str(exc), "param_norms": norms}, indent=1))


def train(
    dataset: ImageDataset,
    vit_config: ViTConfig,
    dino_config: DinoConfig,
    epochs: float | None = None,
    seed: int = 0,
    steps: int | None = None,
    state: DinoState | None = None,
    total_steps: int | None = None,
    on_step=None,
    diagnostic_dir=None,
) -> tuple[DinoState, list[dict]]:
    """Run DINO training; returns the final state and one metrics row per step.

    Either ``epochs`` (one epoch is ``ceil(n / batch_size)`` steps) or
    ``steps`` sets the budget. Passing ``state`` resumes: its step counter
    keeps counting and the per-step RNG picks up where it stopped.
    ``total_steps`` fixes the cosine horizon across resumes.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    if dataset.image_size != vit_config.image_size:
        raise ShapeMismatch(f"dataset images are {dataset.image_size}px, model expects {vit_config.image_size}")
    per_epoch = math.ceil(n / dino_config.batch_size)
    if steps is None:
        steps = int(round((epochs or 0) * per_epoch))
    if state is None:
        seeds = np.random.SeedSequence(seed).generate_state(1)
        state = init_state(vit_config, dino_config, seed=int(seeds[0]) % (2**31))
    horizon = total_steps or state.step + steps
    log = []
    bs = min(dino_config.batch_size, n)
    for _ in range(steps):
        rng = step_rng(seed, state.step)
        idx = rng.choice(n, size=bs, replace=False)
        lr = learning_rate(state.step, horizon, dino_config)
        try:
            loss, ent = train_step(state, dataset.images[idx], dino_config, lr, rng)
        except NonFiniteLoss as exc:
            if diagnostic_dir is not None:
                _diagnostic_dump(Path(diagnostic_dir) / "nonfinite_diagnostic.json", state, exc)
            raise
        row = {"step": state.step, "loss": loss, "teacher_entropy": ent, "lr": lr}
        log.append(row)
        if on_step is not None:
            on_step(state, row)
    return state, log


# --------------------------------------------------------------- persistence


def state_tensors(state: DinoState) -> dict[str, torch.Tensor]:
    out = {}
    for name, p in state.student.named_parameters():
        out[f"student.{name}"] = p
    for name, p in state.teacher.named_parameters():
        out[f"teacher.{name}"] = p
    out["center"] = state.center
    if state.optimizer is not None:
        names = {id(p): n for n, p in state.student.named_parameters()}
        for group in state.optimizer.param_groups:
            for p in group["params"]:
                st = state.optimizer.state.get(p)
                if st:
                    out[f"optim.exp_avg.{names[id(p)]}"] = st["exp_avg"]
                    out[f"optim.exp_avg_sq.{names[id(p)]}"] = st["exp_avg_sq"]
    return out


def save_state(path, state: DinoState, vit_cfg: ViTConfig, dino_cfg: DinoConfig, extra: dict | None = None):
    from .vit.checkpoint import save_checkpoint

    config = {"vit": vit_cfg.to_dict(), "dino": dino_cfg.to_dict(), "step": state.step, **(extra or {})}
    return save_checkpoint(path, config, state_tensors(state))


def load_state(path) -> tuple[DinoState, ViTConfig, DinoConfig, dict]:
    from .vit.checkpoint import load_checkpoint

    config, tensors = load_checkpoint(path)
    vit_cfg = ViTConfig(**config["vit"])
    dino_cfg = DinoConfig(**config["dino"])
    state = init_state(vit_cfg, dino_cfg, seed=0)
    with torch.no_grad():
        for prefix, net in (("student", state.student), ("teacher", state.teacher)):
            for name, p in net.named_parameters():
                p.copy_(torch.from_numpy(tensors[f"{prefix}.{name}"]))
        state.center = torch.from_numpy(tensors["center"]).clone()
    step = int(config.get("step", 0))
    state.step = step
    opt = state.optimizer
    params = dict(state.student.named_parameters())
    for name, p in params.items():
        key = f"optim.exp_avg.{name}"
        if key in tensors:
            opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(tensors[key]).clone(),
                "exp_avg_sq": torch.from_numpy(tensors[f"optim.exp_avg_sq.{name}"]).clone(),
            }
    return state, vit_cfg, dino_cfg, config
