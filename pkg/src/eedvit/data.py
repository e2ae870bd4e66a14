"""Datasets, synthetic corpora and activation dumps.

Two synthetic corpora stand in for real data:

* texture-centric: stationary band-limited fields whose class is set by the
  dominant orientation and frequency band, never by layout;
* object-centric: one solid shape (the class) at random pose, scale and colour
  over a cluttered band-pass background that carries no label information.

Activation dump layout (little-endian)::

    5 bytes   magic b"EEDV1"
    u8        version (1)
    16 bytes  model config hash, ASCII hex
    u32 x 4   layer count, image count, tokens per image, D
    u8        1 if token 0 is a CLS token, else 0
    per layer:
      u32     layer index
      f32[]   image count * tokens * D values, row-major (image, token, dim)
    u32       CRC-32 of every preceding byte
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, FormatError
from .fileio import atomic_write_bytes, atomic_write_text
from .vit.model import LayerActivations

CIFAR_RECORD = 1 + 1 + 3072
TEXTURE_CLASSES = 8
SHAPES = ("disc", "square", "triangle", "cross", "ring")


@dataclass
class ImageDataset:
    images: np.ndarray  # (n, H, W, 3) float32 in [0, 1]
    labels: np.ndarray | None
    source: str
    masks: np.ndarray | None = None  # foreground masks for object corpora

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise FormatError(f"images must be (n, H, W, 3), got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise FormatError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> ImageDataset:
        idx = np.asarray(idx)
        return ImageDataset(
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            self.source,
            None if self.masks is None else self.masks[idx],
        )


# ----------------------------------------------------------------------- CIFAR


def parse_cifar100(blob: bytes) -> ImageDataset:
    if len(blob) == 0 or len(blob) % CIFAR_RECORD:
        raise FormatError(f"CIFAR-100 file size {len(blob)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    fine = rec[:, 1].astype(np.int64)
    pix = rec[:, 2:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return ImageDataset(pix.astype(np.float32) / 255.0, fine, "cifar100")


def load_cifar100(path) -> ImageDataset:
    """Read the standard CIFAR-100 binary file (coarse, fine, 3072 pixel bytes per record)."""
    with open(path, "rb") as fh:
        return parse_cifar100(fh.read())


# ------------------------------------------------------------------ synthetic


def _bandpass_noise(rng: np.random.Generator, size: int, f_lo: float, f_hi: float, channels: int = 3) -> np.ndarray:
    """White noise filtered to an annulus of radial frequencies (cycles/pixel)."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    r = np.sqrt(fx * fx + fy * fy)
    filt = ((r >= f_lo) & (r <= f_hi)).astype(np.float64)
    out = np.empty((size, size, channels))
    for c in range(channels):
        spec = np.fft.fft2(rng.standard_normal((size, size))) * filt
        field = np.real(np.fft.ifft2(spec))
        out[..., c] = field / (field.std() + 1e-12)
    return out


def texture_class_params(k: int = TEXTURE_CLASSES) -> list[tuple[float, float]]:
    """(orientation radians, centre frequency cycles/pixel) per class."""
    params = []
    for c in range(k):
        theta = np.pi * (c % 4) / 4
        freq = 0.18 if c < 4 else 0.32
        params.append((theta, freq))
    return params


def gen_texture_dataset(seed: int, n: int, size: int = 32, num_classes: int = TEXTURE_CLASSES) -> ImageDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    classes = texture_class_params(num_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = rng.integers(0, num_classes, size=n)
    for i in range(n):
        theta0, f0 = classes[labels[i]]
        field = np.zeros((size, size, 3))
        for _ in range(6):
            theta = theta0 + 0.25 * rng.standard_normal()
            f = f0 * (1 + 0.12 * rng.standard_normal())
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            field += wave[..., None] * rng.uniform(0.3, 1.0, size=3)
        field /= field.std() + 1e-12
        field += 0.6 * _bandpass_noise(rng, size, 0.6 * f0, 1.4 * f0)
        field /= field.std() + 1e-12
        base = rng.uniform(0.35, 0.65, size=3)
        contrast = rng.uniform(0.12, 0.2)
        images[i] = np.clip(base + contrast * field, 0.0, 1.0)
    return ImageDataset(images, labels.astype(np.int64), "texture")


def _shape_mask(kind: str, size: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disc":
        return u * u + v * v <= radius * radius
    if kind == "square":
        h = radius / np.sqrt(2) * 1.15
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if kind == "triangle":
        # equilateral, circumradius ``radius``
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = angle + 2 * np.pi * k / 3
            nx, ny = np.cos(a), np.sin(a)
            inside &= (dx * nx + dy * ny) <= radius / 2
        return inside
    if kind == "cross":
        w = radius * 0.38
        return ((np.abs(u) <= radius) & (np.abs(v) <= w)) | ((np.abs(v) <= radius) & (np.abs(u) <= w))
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= radius * radius) & (r2 >= (0.55 * radius) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def gen_object_dataset(
    seed: int, n: int, size: int = 32, shapes=SHAPES, min_area: float = 0.05, max_area: float = 0.40
) -> ImageDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    masks = np.empty((n, size, size), dtype=bool)
    labels = rng.integers(0, len(shapes), size=n)
    for i in range(n):
        bg_base = rng.uniform(0.3, 0.7, size=3)
        clutter = _bandpass_noise(rng, size, 0.15, 0.45)
        bg = bg_base + rng.uniform(0.06, 0.1) * clutter
        for _ in range(100):
            radius = rng.uniform(0.18, 0.42) * size
            cx, cy = rng.uniform(0.3, 0.7, size=2) * size
            mask = _shape_mask(shapes[labels[i]], size, cx, cy, radius, rng.uniform(0, 2 * np.pi))
            frac = mask.mean()
            if min_area <= frac <= max_area:
                break
        else:  # pragma: no cover - radius range makes this unreachable in practice
            raise RuntimeError("could not place a shape within the area bounds")
        color = rng.uniform(0, 1, size=3)
        # keep the figure distinguishable from the mean background
        if np.abs(color - bg_base).max() < 0.3:
            color = np.where(bg_base > 0.5, bg_base - 0.35, bg_base + 0.35)
        img = np.where(mask[..., None], color, bg)
        images[i] = np.clip(img, 0.0, 1.0)
        masks[i] = mask
    return ImageDataset(images, labels.astype(np.int64), "object", masks)


def generate(kind: str, seed: int, n: int, size: int = 32) -> ImageDataset:
    if kind == "texture":
        return gen_texture_dataset(seed, n, size)
    if kind == "object":
        return gen_object_dataset(seed, n, size)
    raise ValueError(f"unknown synthetic kind {kind!r}")


# ------------------------------------------------------- on-disk datasets


def _npy_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def save_dataset(ds: ImageDataset, out_dir, extra: dict | None = None) -> Path:
    """Write images.npy, labels.npy (and masks.npy) plus a key-value manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img = _npy_bytes(ds.images.astype(np.float32))
    atomic_write_bytes(out / "images.npy", img)
    if ds.labels is not None:
        atomic_write_bytes(out / "labels.npy", _npy_bytes(ds.labels.astype(np.int64)))
    if ds.masks is not None:
        atomic_write_bytes(out / "masks.npy", _npy_bytes(ds.masks))
    meta = {
        "source": ds.source,
        "count": len(ds),
        "image_size": ds.image_size,
        "images_sha256": hashlib.sha256(img).hexdigest(),
        **(extra or {}),
    }
    atomic_write_text(out / "dataset.txt", "".join(f"{k} = {v}\n" for k, v in meta.items()))
    return out


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_dataset(path) -> ImageDataset:
    """Load a saved dataset directory or a raw CIFAR-100 binary file."""
    p = Path(path)
    if p.is_dir():
        meta = read_kv(p / "dataset.txt")
        images = np.load(p / "images.npy", allow_pickle=False)
        labels = np.load(p / "labels.npy", allow_pickle=False) if (p / "labels.npy").exists() else None
        masks = np.load(p / "masks.npy", allow_pickle=False) if (p / "masks.npy").exists() else None
        return ImageDataset(images, labels, meta.get("source", "unknown"), masks)
    return load_cifar100(p)


# ---------------------------------------------------------------------- dumps

DUMP_MAGIC = b"EEDV1"
DUMP_VERSION = 1
_HEADER = struct.Struct("<5sB16sIIIIB")


def encode_dump(activations: list[LayerActivations], config_hash: str) -> bytes:
    if not activations:
        raise FormatError("no activations to dump")
    first = activations[0].tokens
    n_img, n_tok, d = first.shape
    has_cls = activations[0].has_cls
    h = config_hash.encode("ascii")[:16].ljust(16, b"0")
    parts = [_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, h, len(activations), n_img, n_tok, d, int(has_cls))]
    for act in activations:
        if act.tokens.shape != first.shape:
            raise FormatError(f"layer {act.layer_index} has shape {act.tokens.shape}, expected {first.shape}")
        parts.append(struct.pack("<I", act.layer_index))
        parts.append(np.ascontiguousarray(act.tokens, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_dump(blob: bytes) -> tuple[dict, list[LayerActivations]]:
    if len(blob) < _HEADER.size + 4:
        raise FormatError("activation dump is truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("activation dump checksum mismatch")
    magic, version, h, n_layers, n_img, n_tok, d, has_cls = _HEADER.unpack_from(body, 0)
    if magic != DUMP_MAGIC:
        raise FormatError("bad magic, not an EEDV1 dump")
    if version != DUMP_VERSION:
        raise FormatError(f"unsupported dump version {version}")
    block = n_img * n_tok * d
    expected = _HEADER.size + n_layers * (4 + 4 * block)
    if len(body) != expected:
        raise FormatError(f"dump body is {len(body)} bytes but the header implies {expected}")
    header = {
        "config_hash": h.decode("ascii"),
        "layers": n_layers,
        "images": n_img,
        "tokens": n_tok,
        "dim": d,
        "has_cls": bool(has_cls),
    }
    acts = []
    off = _HEADER.size
    for _ in range(n_layers):
        (idx,) = struct.unpack_from("<I", body, off)
        off += 4
        vals = np.frombuffer(body, dtype="<f4", count=block, offset=off).reshape(n_img, n_tok, d)
        acts.append(LayerActivations(int(idx), vals.astype(np.float32), has_cls=bool(has_cls)))
        off += 4 * block
    return header, acts


def write_dump(path, activations: list[LayerActivations], config_hash: str) -> Path:
    return atomic_write_bytes(path, encode_dump(activations, config_hash))


def read_dump(path) -> tuple[dict, list[LayerActivations]]:
    with open(path, "rb") as fh:
        return decode_dump(fh.read())
