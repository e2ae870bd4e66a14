"""Differentiable building blocks, written out from torch tensor primitives.

torch provides the reverse-mode tape; each op below is checked against
central finite differences in the test suite.
"""

from __future__ import annotations

import math
from types import SimpleNamespace

import torch
import torch.nn.functional as F

from ..errors import GraphNotRecorded, ShapeMismatch


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    # weight is (out, in), matching the checkpoint layout
    y = x @ weight.transpose(0, 1)
    return y + bias if bias is not None else y


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return xc / torch.sqrt(var + eps) * weight + bias


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))


def cross_entropy(target_probs: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Per-row ``-sum_k q_k log softmax(logits)_k`` for soft targets ``q``."""
    if target_probs.shape != logits.shape:
        raise ShapeMismatch(f"target {tuple(target_probs.shape)} vs logits {tuple(logits.shape)}")
    return -(target_probs * log_softmax(logits, dim=-1)).sum(dim=-1)


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / torch.sqrt((x * x).sum(dim=-1, keepdim=True) + eps)


def attention(
    x: torch.Tensor,
    qkv_weight: torch.Tensor,
    qkv_bias: torch.Tensor,
    proj_weight: torch.Tensor,
    proj_bias: torch.Tensor,
    num_heads: int,
    return_weights: bool = False,
):
    """Multi-head self-attention over tokens ``x`` of shape (B, N, D)."""
    b, n, d = x.shape
    if d % num_heads:
        raise ShapeMismatch(f"embed dim {d} not divisible by {num_heads} heads")
    hd = d // num_heads
    qkv = linear(x, qkv_weight, qkv_bias).reshape(b, n, 3, num_heads, hd).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
    weights = softmax(scores, dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(b, n, d)
    out = linear(out, proj_weight, proj_bias)
    return (out, weights) if return_weights else out


def fused_attention(x, qkv_weight, qkv_bias, proj_weight, proj_bias, num_heads: int):
    """Same contract as :func:`attention`, using torch's fused kernels."""
    b, n, d = x.shape
    if d % num_heads:
        raise ShapeMismatch(f"embed dim {d} not divisible by {num_heads} heads")
    qkv = F.linear(x, qkv_weight, qkv_bias).reshape(b, n, 3, num_heads, d // num_heads).permute(2, 0, 3, 1, 4)
    out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
    return F.linear(out.transpose(1, 2).reshape(b, n, d), proj_weight, proj_bias)


EXPLICIT = SimpleNamespace(linear=linear, gelu=gelu, layer_norm=layer_norm, attention=attention)
FUSED = SimpleNamespace(
    linear=F.linear,
    gelu=F.gelu,
    layer_norm=lambda x, w, b, eps=1e-6: F.layer_norm(x, (x.shape[-1],), w, b, eps),
    attention=fused_attention,
)


def kernels(fused: bool) -> SimpleNamespace:
    return FUSED if fused else EXPLICIT


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, num_patches, C * p * p), patches in row-major order."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ShapeMismatch(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch_size * patch_size)


def resize_pos_embed(pos: torch.Tensor, grid: int) -> torch.Tensor:
    """Bilinearly resample a (G*G, D) positional grid to (grid*grid, D)."""
    g = math.isqrt(pos.shape[0])
    if g == grid:
        return pos
    d = pos.shape[1]
    img = pos.reshape(1, g, g, d).permute(0, 3, 1, 2)
    img = torch.nn.functional.interpolate(img, size=(grid, grid), mode="bilinear", align_corners=False)
    return img.permute(0, 2, 3, 1).reshape(grid * grid, d)


def patch_embed(
    images: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    pos_embed: torch.Tensor,
    patch_size: int,
    cls_token: torch.Tensor | None = None,
    cls_pos: torch.Tensor | None = None,
) -> torch.Tensor:
    """Flatten patches, project linearly, add positions, prepend CLS."""
    patches = patchify(images, patch_size)
    grid = images.shape[-1] // patch_size
    tokens = linear(patches, weight, bias) + resize_pos_embed(pos_embed, grid)
    if cls_token is not None:
        cls = cls_token + (cls_pos if cls_pos is not None else 0.0)
        tokens = torch.cat([cls.expand(tokens.shape[0], 1, -1), tokens], dim=1)
    return tokens


def backward(loss: torch.Tensor, params=None) -> dict[str, torch.Tensor]:
    """Run reverse mode from a scalar loss; return gradients by parameter name.

    ``params`` is an iterable of (name, tensor) pairs, typically
    ``model.named_parameters()``.
    """
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise GraphNotRecorded("loss has no recorded graph; run a forward pass with grad enabled")
    if loss.numel() != 1:
        raise ShapeMismatch("backward expects a scalar loss")
    loss.backward()
    if params is None:
        return {}
    return {name: (p.grad if p.grad is not None else torch.zeros_like(p)) for name, p in params}
