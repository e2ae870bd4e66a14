"""Finite-difference gradient checks for the differentiable ops (float64)."""

from __future__ import annotations

import numpy as np
import torch

from eedvit.dino import DinoConfig, DinoHead, dino_loss
from eedvit.vit import ops
from eedvit.vit.model import Block, ViTConfig

from oracles import finite_difference_grad


def relative_gradient_error(fn, arrays: list[np.ndarray], rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Compare torch reverse mode with central differences on ``sum(fn(*xs) * R)``."""
    out_shape = fn(*[torch.from_numpy(a) for a in arrays]).shape
    proj = torch.from_numpy(rng.standard_normal(tuple(out_shape)))

    def scalar_np(*xs):
        with torch.no_grad():
            return float((fn(*[torch.from_numpy(x) for x in xs]) * proj).sum())

    leaves = [torch.from_numpy(a.copy()).requires_grad_(True) for a in arrays]
    (fn(*leaves) * proj).sum().backward()
    ad = np.concatenate([lf.grad.numpy().ravel() for lf in leaves])
    fd = np.concatenate([g.ravel() for g in finite_difference_grad(scalar_np, [a.copy() for a in arrays], eps)])
    return float(np.linalg.norm(ad - fd) / max(np.linalg.norm(fd), 1e-12))


def _block_fn(cfg: ViTConfig):
    blk = Block(cfg).double()
    names = [n for n, _ in blk.named_parameters()]

    def fn(x, *params):
        return torch.func.functional_call(blk, dict(zip(names, params)), (x,))

    return fn, [p.detach().numpy().copy() for _, p in blk.named_parameters()]


def case(op: str, rng: np.random.Generator):
    """Return (fn, arrays) for one random configuration of ``op``."""
    r = rng.standard_normal
    b, n = int(rng.integers(1, 3)), int(rng.integers(1, 5))
    if op == "linear":
        i, o = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        return ops.linear, [r((b, n, i)), r((o, i)), r(o)]
    if op == "softmax":
        return (lambda x: ops.softmax(x, dim=-1)), [r((b, n, int(rng.integers(1, 7)))) * 2]
    if op == "gelu":
        return ops.gelu, [r((b, n, 5)) * 2]
    if op == "layer_norm":
        d = int(rng.integers(2, 8))
        return (lambda x, w, bb: ops.layer_norm(x, w, bb)), [r((b, n, d)), 1 + 0.3 * r(d), r(d)]
    if op == "cross_entropy":
        k = int(rng.integers(2, 7))
        q = rng.dirichlet(np.ones(k), size=(b,))
        return ops.cross_entropy, [q, r((b, k)) * 2]
    if op == "attention":
        h = int(rng.integers(1, 3))
        d = h * int(rng.integers(1, 4))
        return (
            lambda x, wq, bq, wp, bp: ops.attention(x, wq, bq, wp, bp, h),
            [r((b, n, d)), 0.5 * r((3 * d, d)), r(3 * d), r((d, d)), r(d)],
        )
    if op == "patch_embed":
        p = int(rng.integers(1, 3))
        g = int(rng.integers(1, 3))
        d = int(rng.integers(1, 5))
        size = p * g
        pos_grid = int(rng.integers(1, 4))  # exercise positional resampling too
        return (
            lambda img, w, bb, pos, cls, cpos: ops.patch_embed(img, w, bb, pos, p, cls, cpos),
            [rng.uniform(0, 1, (b, 3, size, size)), r((d, 3 * p * p)), r(d), r((pos_grid**2, d)), r((1, 1, d)), r((1, 1, d))],
        )
    if op == "l2_normalize":
        return ops.l2_normalize, [r((b, 5))]
    if op == "fused_layer_norm":
        d = int(rng.integers(2, 8))
        return ops.FUSED.layer_norm, [r((b, n, d)), 1 + 0.3 * r(d), r(d)]
    if op == "fused_gelu":
        return ops.FUSED.gelu, [r((b, n, 5)) * 2]
    if op == "fused_attention":
        h = int(rng.integers(1, 3))
        d = h * int(rng.integers(1, 4))
        return (
            lambda x, wq, bq, wp, bp: ops.fused_attention(x, wq, bq, wp, bp, h),
            [r((b, n, d)), 0.5 * r((3 * d, d)), r(3 * d), r((d, d)), r(d)],
        )
    if op == "encoder_block":
        h = int(rng.integers(1, 3))
        cfg = ViTConfig(image_size=4, patch_size=2, embed_dim=2 * h, num_heads=h, mlp_ratio=2, fused_kernels=False)
        fn, params = _block_fn(cfg)
        params = [p + 0.3 * r(p.shape) for p in params]
        return fn, [r((1, n, cfg.embed_dim))] + params
    if op == "dino_head":
        cfg = DinoConfig(out_dim=5, head_hidden=4, head_bottleneck=3)
        head = DinoHead(3, cfg, fused=False).double()
        names = [nm for nm, _ in head.named_parameters()]
        params = [0.5 * r(tuple(p.shape)) for _, p in head.named_parameters()]
        return (lambda x, *ps: torch.func.functional_call(head, dict(zip(names, ps)), (x,))), [r((b, 3))] + params
    if op == "dino_loss":
        k = int(rng.integers(2, 6))
        cfg = DinoConfig(out_dim=k, num_local_crops=1)
        teacher = [torch.from_numpy(r((b, k))), torch.from_numpy(r((b, k)))]
        center = torch.from_numpy(0.1 * r(k))
        return (lambda s0, s1, s2: dino_loss([s0, s1, s2], teacher, cfg, center).reshape(1)), [r((b, k)) for _ in range(3)]
    raise KeyError(op)


OPS = (
    "linear",
    "softmax",
    "gelu",
    "layer_norm",
    "cross_entropy",
    "attention",
    "patch_embed",
    "l2_normalize",
    "fused_layer_norm",
    "fused_gelu",
    "fused_attention",
    "encoder_block",
    "dino_head",
    "dino_loss",
)


def worst_error(op: str, configs: int, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, OPS.index(op)])
    worst = 0.0
    for _ in range(configs):
        fn, arrays = case(op, rng)
        worst = max(worst, relative_gradient_error(fn, arrays, rng))
    return worst
