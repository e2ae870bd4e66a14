"""Layer-wise EED profiles, bottleneck detection and cross-dataset comparison.

Layer convention: L0 is the output of the first encoder block; the patch
embedding itself is not a measured layer.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ImageDataset
from .errors import DegenerateSpectrum, LayerCountMismatch
from .fileio import atomic_write_text
from .numlin import covariance, sym_eig
from .spectral import SpectrumReport, spectrum_report
from .vit.model import LayerActivations, ViT, images_to_tensor

LAYER_CONVENTION = "L0 = first block output"
CSV_COLUMNS = ("layer", "entropy_nats", "n_eff", "eed_percent", "phantom_count", "mi_proxy")
DEFAULT_PROBE_IMAGES = 256


@dataclass
class EEDProfile:
    reports: list[SpectrumReport]
    probe_images: int
    probe_tokens: int
    config_hash: str = ""
    dataset: str = ""
    centered: bool = True
    include_cls: bool = True
    capture_point: str = "residual"

    @property
    def num_layers(self) -> int:
        return len(self.reports)

    @property
    def eed_percent(self) -> np.ndarray:
        return np.array([r.eed_percent for r in self.reports])

    def metadata(self) -> dict:
        return {
            "layer_convention": LAYER_CONVENTION,
            "dataset": self.dataset,
            "config_hash": self.config_hash,
            "covariance": "centered" if self.centered else "uncentered",
            "include_cls": str(self.include_cls).lower(),
            "capture_point": self.capture_point,
            "probe_images": self.probe_images,
            "probe_tokens": self.probe_tokens,
            "bound_units": "proxy, arbitrary units",
        }


@dataclass(frozen=True)
class BottleneckSummary:
    argmin_layer: int
    min_eed_percent: float
    first_eed_percent: float
    last_eed_percent: float
    u_shape_score: float


def _backbone(model) -> ViT:
    if isinstance(model, ViT):
        return model
    if hasattr(model, "teacher"):  # DinoState: analyse the teacher, as DINO evaluates it
        return model.teacher.backbone
    if hasattr(model, "backbone"):
        return model.backbone
    raise TypeError(f"cannot find a ViT backbone in {type(model).__name__}")


def capture_activations(
    model, images: np.ndarray, batch_size: int = 64, capture_point: str = "residual"
) -> list[LayerActivations]:
    """Capture every block's tokens for ``images``, batched, without grad."""
    vit = _backbone(model)
    dtype = next(vit.parameters()).dtype
    layers = range(vit.cfg.num_layers)
    chunks: list[list[np.ndarray]] = [[] for _ in layers]
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images_to_tensor(images[start : start + batch_size], dtype=dtype)
            _, caps = vit.forward_with_capture(x, layers, capture_point)
            for c in caps:
                chunks[c.layer_index].append(c.tokens)
    has_cls = vit.cfg.include_cls_token
    return [LayerActivations(i, np.concatenate(chunks[i]), has_cls=has_cls) for i in layers]


def profile_from_activations(
    activations: list[LayerActivations],
    centered: bool = True,
    include_cls: bool = True,
    method: str = "jacobi",
    **meta,
) -> EEDProfile:
    reports = []
    rows = 0
    for act in activations:
        h = act.matrix(include_cls).astype(np.float64)
        rows = h.shape[0]
        try:
            lam = sym_eig(covariance(h, centered=centered), method=method)
            reports.append(spectrum_report(lam))
        except DegenerateSpectrum as exc:
            raise DegenerateSpectrum(str(exc), layer=act.layer_index) from exc
    n_img = activations[0].tokens.shape[0] if activations else 0
    return EEDProfile(reports, n_img, rows, centered=centered, include_cls=include_cls, **meta)


def probe_indices(n: int, probe_images: int, seed: int) -> np.ndarray:
    if probe_images >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng([seed, 0x9B0BE]).choice(n, size=probe_images, replace=False))


def profile(
    model,
    dataset: ImageDataset,
    probe_images: int = DEFAULT_PROBE_IMAGES,
    seed: int = 0,
    centered: bool = True,
    include_cls: bool = True,
    capture_point: str = "residual",
    method: str = "jacobi",
) -> EEDProfile:
    """EED of every block's pooled token covariance over a seeded probe set."""
    vit = _backbone(model)
    idx = probe_indices(len(dataset), probe_images, seed)
    acts = capture_activations(vit, dataset.images[idx], capture_point=capture_point)
    return profile_from_activations(
        acts,
        centered=centered,
        include_cls=include_cls,
        method=method,
        config_hash=vit.cfg.config_hash(),
        dataset=dataset.source,
        capture_point=capture_point,
    )


def bottleneck(profile_or_values) -> BottleneckSummary:
    """Interior minimum of the EED% curve and how far it dips below the ends.

    The argmin is taken over layers 1..L-2 (ties go to the smaller index), and
    ``u_shape_score = max(0, min(first, last) - interior_min)``.
    """
    e = profile_or_values.eed_percent if isinstance(profile_or_values, EEDProfile) else profile_or_values
    e = np.asarray(e, dtype=np.float64)
    if e.size < 3:
        raise ValueError("bottleneck needs at least 3 layers")
    interior = e[1:-1]
    k = int(np.argmin(interior))  # first occurrence, i.e. the smaller index on ties
    lo = float(interior[k])
    score = max(0.0, min(e[0], e[-1]) - lo)
    return BottleneckSummary(k + 1, lo, float(e[0]), float(e[-1]), float(score))


@dataclass
class ComparisonReport:
    rows: list[tuple[str, BottleneckSummary]]
    ties: list[tuple[str, str]] = field(default_factory=list)

    @property
    def order(self) -> list[str]:
        return [name for name, _ in self.rows]

    def to_text(self) -> str:
        lines = [f"{'dataset':<24} {'min EED%':>9} {'layer':>6} {'first':>7} {'last':>7} {'U-score':>8}"]
        for name, s in self.rows:
            lines.append(
                f"{name:<24} {s.min_eed_percent:>9.2f} {('L' + str(s.argmin_layer)):>6} "
                f"{s.first_eed_percent:>7.2f} {s.last_eed_percent:>7.2f} {s.u_shape_score:>8.2f}"
            )
        for a, b in self.ties:
            lines.append(f"tie: {a} and {b} have equal min EED%")
        lines.append(f"# layer convention: {LAYER_CONVENTION}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "dataset", "min_eed_percent", "argmin_layer", "first_eed_percent", "last_eed_percent", "u_shape_score"])
        for rank, (name, s) in enumerate(self.rows, 1):
            w.writerow([rank, name, _fmt(s.min_eed_percent), s.argmin_layer, _fmt(s.first_eed_percent),
                        _fmt(s.last_eed_percent), _fmt(s.u_shape_score)])
        return buf.getvalue()


def compare_profiles(profiles: dict, tie_tol: float = 1e-9) -> ComparisonReport:
    """Rank named profiles (or EED% sequences) from deepest to shallowest bottleneck."""
    if len(profiles) < 2:
        raise ValueError("need at least two profiles to compare")
    lengths = {name: len(p.eed_percent if isinstance(p, EEDProfile) else p) for name, p in profiles.items()}
    if len(set(lengths.values())) > 1:
        desc = ", ".join(f"{n} has {k}" for n, k in lengths.items())
        raise LayerCountMismatch(f"profiles disagree on layer count: {desc}")
    summaries = [(name, bottleneck(p)) for name, p in profiles.items()]
    rows = sorted(summaries, key=lambda r: r[1].min_eed_percent)  # stable: ties keep input order
    ties = [
        (rows[i][0], rows[i + 1][0])
        for i in range(len(rows) - 1)
        if abs(rows[i][1].min_eed_percent - rows[i + 1][1].min_eed_percent) <= tie_tol
    ]
    return ComparisonReport(rows, ties)


# ------------------------------------------------------------------ export


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def profile_csv(prof: EEDProfile) -> str:
    if not prof.reports:
        raise ValueError("profile is empty")
    buf = io.StringIO()
    for k, v in prof.metadata().items():
        buf.write(f"# {k} = {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for i, r in enumerate(prof.reports):
        w.writerow([i, _fmt(r.entropy_nats), _fmt(r.n_eff), _fmt(r.eed_percent), r.phantom_count, _fmt(r.mi_proxy_nats)])
    return buf.getvalue()


def read_profile_csv(path) -> tuple[dict, list[dict]]:
    """Parse an exported profile CSV into (metadata, rows)."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition("=")
            meta[k.strip()] = v.strip()
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(body)
    if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(CSV_COLUMNS)}")
    rows = []
    for r in reader:
        rows.append({k: (int(v) if k in ("layer", "phantom_count") else float(v)) for k, v in r.items()})
    return meta, rows


def profile_svg(prof: EEDProfile, width: int = 480, height: int = 300) -> str:
    """Self-contained line chart of EED% against layer index."""
    e = prof.eed_percent
    if e.size == 0:
        raise ValueError("profile is empty")
    ml, mr, mt, mb = 50, 20, 30, 40
    pw, ph = width - ml - mr, height - mt - mb
    n = e.size

    def xy(i, v):
        x = ml + (pw * i / (n - 1) if n > 1 else pw / 2)
        y = mt + ph * (1 - v / 100.0)
        return f"{x:.2f},{y:.2f}"

    d = "M " + " L ".join(xy(i, v) for i, v in enumerate(e))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">'
        f"EED% by layer ({prof.dataset or 'profile'})</text>",
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
    ]
    for v in (0, 25, 50, 75, 100):
        y = mt + ph * (1 - v / 100)
        parts.append(f'<text x="{ml - 6}" y="{y + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="10">{v}</text>')
    for i in range(n):
        x = ml + (pw * i / (n - 1) if n > 1 else pw / 2)
        parts.append(
            f'<text x="{x:.2f}" y="{mt + ph + 15}" text-anchor="middle" font-family="sans-serif" font-size="10">L{i}</text>'
        )
    parts.append(f'<path class="eed" d="{d}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export(prof: EEDProfile, path, fmt: str = "csv") -> Path:
    """Write ``prof`` as CSV or SVG; nothing is written if the profile is empty."""
    if not prof.reports:
        raise ValueError("profile is empty")
    if fmt == "csv":
        text = profile_csv(prof)
    elif fmt == "svg":
        text = profile_svg(prof)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return atomic_write_text(path, text)


def endpoint_report(model, dataset: ImageDataset, probe_images: int = DEFAULT_PROBE_IMAGES, seed: int = 0,
                    centered: bool = True, include_cls: bool = True) -> SpectrumReport:
    """Spectrum of the model's final (normed) features on the same probe set."""
    vit = _backbone(model)
    idx = probe_indices(len(dataset), probe_images, seed)
    feats = []
    with torch.no_grad():
        for start in range(0, len(idx), 64):
            x = images_to_tensor(dataset.images[idx[start : start + 64]], dtype=next(vit.parameters()).dtype)
            feats.append(vit(x).numpy())
    f = np.concatenate(feats)
    if vit.cfg.include_cls_token and not include_cls:
        f = f[:, 1:]
    h = f.reshape(-1, f.shape[-1]).astype(np.float64)
    return spectrum_report(sym_eig(covariance(h, centered=centered)))


def nan_safe(x: float) -> float:
    return x if math.isfinite(x) else float("nan")
