"""Pre-norm Vision Transformer with per-block residual-stream capture."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ..errors import ShapeMismatch
from . import ops


@dataclass
class ViTConfig:
    """Backbone hyperparameters. Defaults are the desk-scale model.

    ``ViTConfig.small()`` returns the full ViT-Small geometry (D=384, 12
    blocks, 6 heads) with the 4x4 patches used for low-resolution inputs.
    ``fused_kernels`` picks torch's fused LayerNorm/GELU/attention over the
    explicit reference ops; both compute the same function.
    """

    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    mlp_ratio: float = 4.0
    include_cls_token: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-6
    fused_kernels: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeMismatch(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ShapeMismatch(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @classmethod
    def small(cls, image_size: int = 32, patch_size: int = 4) -> ViTConfig:
        return cls(image_size=image_size, patch_size=patch_size, embed_dim=384, num_layers=12, num_heads=6)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + int(self.include_cls_token)

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LayerActivations:
    """Captured tokens of one block for a batch: ``tokens`` is (B, N_tok, D)."""

    layer_index: int
    tokens: np.ndarray
    has_cls: bool = True

    def matrix(self, include_cls: bool = True) -> np.ndarray:
        """Pool tokens across images into the (B * N_tok) x D matrix."""
        t = self.tokens
        if self.has_cls and not include_cls:
            t = t[:, 1:, :]
        return t.reshape(-1, t.shape[-1])


def _trunc_normal_(t: torch.Tensor, std: float, gen: torch.Generator | None):
    with torch.no_grad():
        t.normal_(0.0, std, generator=gen)
        # resample anything outside two standard deviations
        for _ in range(100):
            bad = t.abs() > 2 * std
            if not bad.any():
                break
            t[bad] = torch.empty(int(bad.sum()), dtype=t.dtype).normal_(0.0, std, generator=gen)
        t.clamp_(-2 * std, 2 * std)
    return t


class Block(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        d, h = cfg.embed_dim, cfg.mlp_hidden
        self.num_heads = cfg.num_heads
        self.eps = cfg.ln_eps
        self.k = ops.kernels(cfg.fused_kernels)
        self.norm1_weight = nn.Parameter(torch.ones(d))
        self.norm1_bias = nn.Parameter(torch.zeros(d))
        self.qkv_weight = nn.Parameter(torch.zeros(3 * d, d))
        self.qkv_bias = nn.Parameter(torch.zeros(3 * d))
        self.proj_weight = nn.Parameter(torch.zeros(d, d))
        self.proj_bias = nn.Parameter(torch.zeros(d))
        self.norm2_weight = nn.Parameter(torch.ones(d))
        self.norm2_bias = nn.Parameter(torch.zeros(d))
        self.fc1_weight = nn.Parameter(torch.zeros(h, d))
        self.fc1_bias = nn.Parameter(torch.zeros(h))
        self.fc2_weight = nn.Parameter(torch.zeros(d, h))
        self.fc2_bias = nn.Parameter(torch.zeros(d))

    def norm1(self, x):
        return self.k.layer_norm(x, self.norm1_weight, self.norm1_bias, self.eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k = self.k
        x = x + k.attention(
            self.norm1(x), self.qkv_weight, self.qkv_bias, self.proj_weight, self.proj_bias, self.num_heads
        )
        y = k.layer_norm(x, self.norm2_weight, self.norm2_bias, self.eps)
        y = k.linear(k.gelu(k.linear(y, self.fc1_weight, self.fc1_bias)), self.fc2_weight, self.fc2_bias)
        return x + y


class ViT(nn.Module):
    def __init__(self, cfg: ViTConfig, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        pdim = 3 * cfg.patch_size ** 2
        self.patch_weight = nn.Parameter(torch.zeros(d, pdim))
        self.patch_bias = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches, d))
        if cfg.include_cls_token:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
            self.cls_pos = nn.Parameter(torch.zeros(1, 1, d))
        else:
            self.cls_token = None
            self.cls_pos = None
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.num_layers)])
        self.norm_weight = nn.Parameter(torch.ones(d))
        self.norm_bias = nn.Parameter(torch.zeros(d))
        if seed is not None:
            self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_weight") and not leaf.startswith("norm"):
                _trunc_normal_(p, self.cfg.init_std, gen)
            elif leaf in ("pos_embed", "cls_token", "cls_pos"):
                _trunc_normal_(p, self.cfg.init_std, gen)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return ops.patch_embed(
            images, self.patch_weight, self.patch_bias, self.pos_embed, self.cfg.patch_size, self.cls_token, self.cls_pos
        )

    def final_norm(self, x: torch.Tensor) -> torch.Tensor:
        return ops.kernels(self.cfg.fused_kernels).layer_norm(x, self.norm_weight, self.norm_bias, self.cfg.ln_eps)

    def forward_with_capture(
        self,
        images: torch.Tensor,
        capture_layers=(),
        capture_point: str = "residual",
    ) -> tuple[torch.Tensor, list[LayerActivations]]:
        """Run the encoder, returning final-normed tokens and requested captures.

        ``capture_point="residual"`` records each block's output on the
        residual stream; ``"normed"`` records it after the LayerNorm that the
        next stage applies (the next block's first norm, or the final norm).
        """
        wanted = sorted(set(capture_layers))
        if wanted and (wanted[0] < 0 or wanted[-1] >= self.cfg.num_layers):
            raise ShapeMismatch(f"capture layers {wanted} outside 0..{self.cfg.num_layers - 1}")
        if capture_point not in ("residual", "normed"):
            raise ValueError(f"unknown capture point {capture_point!r}")
        x = self.embed(images)
        n_tok, d = x.shape[1], x.shape[2]
        captures = []
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if x.shape[1] != n_tok or x.shape[2] != d:
                raise ShapeMismatch(f"block {i} changed token shape to {tuple(x.shape)}")
            if i in wanted:
                t = x
                if capture_point == "normed":
                    t = self.blocks[i + 1].norm1(x) if i + 1 < len(self.blocks) else self.final_norm(x)
                captures.append(
                    LayerActivations(i, t.detach().cpu().numpy().copy(), has_cls=self.cfg.include_cls_token)
                )
        return self.final_norm(x), captures

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_with_capture(images)[0]

    def cls_features(self, images: torch.Tensor) -> torch.Tensor:
        """Pooled image feature: CLS token if present, else mean patch token."""
        feats = self.forward(images)
        return feats[:, 0] if self.cfg.include_cls_token else feats.mean(dim=1)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, 3) arrays in [0, 1] -> (B, 3, H, W) tensor."""
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatch(f"expected (B, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def forward_with_capture(images, model: ViT, capture_layers=(), capture_point: str = "residual"):
    """Functional entry point: numpy or torch images through ``model`` without grad."""
    x = images_to_tensor(images, dtype=next(model.parameters()).dtype)
    if x.shape[-1] != model.cfg.image_size or x.shape[-2] != model.cfg.image_size:
        raise ShapeMismatch(f"images are {tuple(x.shape[-2:])}, model expects {model.cfg.image_size}")
    with torch.no_grad():
        return model.forward_with_capture(x, capture_layers, capture_point)
