"""Spectral diagnostics of a layer's token covariance.

All entropies are in nats. The effective encoding dimension (EED) is the
exponential of the Shannon entropy of the eigenvalue distribution, so it runs
from 1 (rank-one collapse) to D (isotropic spectrum).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSpectrum
from .numlin import CovarianceMatrix, covariance, sym_eig

PHANTOM_THRESHOLD = 1e-6
# eigenvalues below this relative magnitude are treated as negative round-off
_NEGATIVE_SLACK = 1e-8


def normalize_spectrum(eigenvalues) -> np.ndarray:
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if lam.ndim != 1 or lam.size == 0:
        raise DegenerateSpectrum("spectrum must be a non-empty 1-D sequence")
    top = float(np.max(np.abs(lam)))
    if np.any(lam < -_NEGATIVE_SLACK * top):
        raise DegenerateSpectrum("spectrum has significantly negative eigenvalues")
    lam = np.clip(lam, 0.0, None)
    total = float(np.sum(lam))
    if total <= 0.0:
        raise DegenerateSpectrum("all eigenvalues are zero")
    return lam / total


def spectral_entropy(p) -> float:
    """Shannon entropy ``-sum p ln p`` with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    s = float(-np.sum(nz * np.log(nz)))
    # round-off can push a one-hot slightly negative or a flat spectrum past ln(support)
    return min(max(s, 0.0), math.log(nz.size)) if nz.size else 0.0


def eed(p) -> float:
    return math.exp(spectral_entropy(p))


def eed_percent(n_eff: float, dim: int) -> float:
    return 100.0 * n_eff / dim


def phantom_count(eigenvalues, rel_threshold: float = PHANTOM_THRESHOLD) -> int:
    """Number of eigenvalues that are positive but below ``rel_threshold * lambda_1``."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if lam.size == 0:
        return 0
    cut = rel_threshold * float(np.max(lam))
    return int(np.count_nonzero((lam > 0) & (lam < cut)))


def gaussian_mi_proxy(sigma) -> float:
    """``0.5 * log det(I + Sigma)`` evaluated from the eigenvalues.

    Accepts a covariance (matrix or :class:`CovarianceMatrix`) or an already
    computed 1-D eigenvalue array.
    """
    if isinstance(sigma, CovarianceMatrix) or np.ndim(sigma) == 2:
        lam = sym_eig(sigma)
    else:
        lam = np.asarray(sigma, dtype=np.float64)
    return 0.5 * float(np.sum(np.log1p(np.clip(lam, 0.0, None))))


def generalization_bound(n_eff: float, sample_count: int) -> float:
    """``sqrt(N_eff / M)``, a proxy in arbitrary units (constant fixed to 1)."""
    if n_eff < 1 or sample_count < 1:
        raise ValueError("need n_eff >= 1 and M >= 1")
    return math.sqrt(n_eff / sample_count)


def information_bound(mi_nats: float, sample_count: int) -> float:
    """``sqrt(2**I / M)`` with I given in nats (so ``2**I_bits == e**I_nats``)."""
    log_val = 0.5 * (mi_nats - math.log(sample_count))
    return math.exp(log_val) if log_val < 700 else math.inf


@dataclass(frozen=True)
class GeneralizationProxy:
    mi_proxy_nats: float
    bound_value: float
    sample_count: int
    information_bound: float = field(default=math.nan)


@dataclass(frozen=True)
class SpectrumReport:
    eigenvalues: np.ndarray
    entropy_nats: float
    n_eff: float
    eed_percent: float
    phantom_count: int
    total_variance: float
    mi_proxy_nats: float

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.size)

    def generalization(self, sample_count: int) -> GeneralizationProxy:
        return GeneralizationProxy(
            mi_proxy_nats=self.mi_proxy_nats,
            bound_value=generalization_bound(self.n_eff, sample_count),
            sample_count=sample_count,
            information_bound=information_bound(self.mi_proxy_nats, sample_count),
        )


def spectrum_report(eigenvalues, phantom_threshold: float = PHANTOM_THRESHOLD) -> SpectrumReport:
    lam = np.asarray(eigenvalues, dtype=np.float64)
    p = normalize_spectrum(lam)
    s = spectral_entropy(p)
    n_eff = math.exp(s)
    return SpectrumReport(
        eigenvalues=lam,
        entropy_nats=s,
        n_eff=n_eff,
        eed_percent=eed_percent(n_eff, lam.size),
        phantom_count=phantom_count(lam, phantom_threshold),
        total_variance=float(np.sum(lam)),
        mi_proxy_nats=gaussian_mi_proxy(lam),
    )


def analyze(h, centered: bool = True, method: str = "jacobi", phantom_threshold: float = PHANTOM_THRESHOLD) -> SpectrumReport:
    """Covariance -> eigenvalues -> :class:`SpectrumReport` for an N x D matrix."""
    return spectrum_report(sym_eig(covariance(h, centered=centered), method=method), phantom_threshold)
