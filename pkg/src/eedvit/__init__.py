"""Layer-wise effective encoding dimension of DINO-trained Vision Transformers."""

__version__ = "0.1.0"
