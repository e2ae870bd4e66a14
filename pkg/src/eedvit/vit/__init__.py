from .checkpoint import load_checkpoint, save_checkpoint
from .model import LayerActivations, ViT, ViTConfig, forward_with_capture, images_to_tensor
from .ops import backward

__all__ = [
    "LayerActivations",
    "ViT",
    "ViTConfig",
    "backward",
    "forward_with_capture",
    "images_to_tensor",
    "load_checkpoint",
    "save_checkpoint",
]
