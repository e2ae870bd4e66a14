"""Dense linear algebra for the spectral analysis path.

Everything here works on plain numpy arrays in float64. The eigensolver is a
cyclic Jacobi method using a round-robin (tournament) pair ordering, so every
round rotates ``D // 2`` disjoint index pairs at once with vectorized updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure, DegenerateInput

DEFAULT_MAX_SWEEPS = 64
CLAMP_RELATIVE = 1e-8


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    """Convert external input to a finite array of ``dtype``.

    NaN and Inf are rejected here rather than deep inside a computation.
    """
    arr = np.asarray(x, dtype=dtype)
    if arr.size and not np.all(np.isfinite(arr)):
        raise DegenerateInput("tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class CovarianceMatrix:
    entries: np.ndarray
    centered: bool
    sample_count: int

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def trace(self) -> float:
        return float(np.trace(self.entries))


def covariance(h, centered: bool = True) -> CovarianceMatrix:
    """Second-moment matrix of the rows of ``h`` (N samples x D features).

    With ``centered=True`` the column mean is removed first (the usual
    empirical covariance); otherwise this is the Gram form ``h.T @ h / N``.
    Both use the 1/N normalization.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise DegenerateInput(f"expected a 2-D N x D matrix, got shape {h.shape}")
    n, d = h.shape
    if n < 2 or d < 1:
        raise DegenerateInput(f"need N >= 2 and D >= 1, got N={n}, D={d}")
    if not np.all(np.isfinite(h)):
        raise DegenerateInput("activation matrix contains non-finite values")
    if centered:
        h = h - h.mean(axis=0, keepdims=True)
    c = (h.T @ h) / n
    c = 0.5 * (c + c.T)
    return CovarianceMatrix(entries=c, centered=centered, sample_count=n)


def _round_robin(d: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one full sweep: every (p, q) with p < q appears exactly once."""
    m = d + (d % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < d and b < d:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _off_norm2(a: np.ndarray) -> float:
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.sum(off * off))


def jacobi_eigh(a, vectors: bool = False, max_sweeps: int = DEFAULT_MAX_SWEEPS, tol: float = 1e-30):
    """Cyclic Jacobi diagonalization of a symmetric matrix.

    Returns the (unsorted) diagonal after convergence and, optionally, the
    accumulated rotation whose columns are eigenvectors.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    d = a.shape[0]
    v = np.eye(d) if vectors else None
    if d == 1:
        return a.diagonal().copy(), v
    scale2 = float(np.sum(a * a))
    if scale2 == 0.0:
        return np.zeros(d), v
    rounds = _round_robin(d)
    for _sweep in range(max_sweeps):
        if _off_norm2(a) <= tol * scale2:
            break
        for p, q in rounds:
            if p.size == 0:
                continue
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            p, q, apq, app, aqq = p[active], q[active], apq[active], app[active], aqq[active]
            with np.errstate(over="ignore"):
                # theta overflows to inf for negligible a_pq, giving t = 0 (no rotation)
                theta = (aqq - app) / (2.0 * apq)
                t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # A <- J^T A J with J acting on the (p, q) planes
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            a[p, q] = 0.0
            a[q, p] = 0.0
            if v is not None:
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = vp * c - vq * s
                v[:, q] = vp * s + vq * c
    else:
        if _off_norm2(a) > tol * scale2:
            raise ConvergenceFailure(
                f"Jacobi did not converge in {max_sweeps} sweeps "
                f"(relative off-diagonal mass {_off_norm2(a) / scale2:.3e})"
            )
    return a.diagonal().copy(), v


def sym_eig(sigma, vectors: bool = False, max_sweeps: int = DEFAULT_MAX_SWEEPS, method: str = "jacobi"):
    """Eigenvalues of a symmetric matrix, sorted descending.

    ``sigma`` may be a :class:`CovarianceMatrix` or a square array. Negative
    eigenvalues within ``1e-8 * max|lambda|`` of zero are round-off and are
    clamped to 0. ``method="lapack"`` swaps in ``numpy.linalg.eigh``.
    If ``vectors`` is true, returns ``(values, vectors)`` with eigenvectors in
    matching column order.
    """
    m = sigma.entries if isinstance(sigma, CovarianceMatrix) else np.asarray(sigma, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DegenerateInput(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DegenerateInput("matrix contains non-finite values")
    scale = np.max(np.abs(m)) if m.size else 0.0
    if scale > 0 and np.max(np.abs(m - m.T)) > 1e-9 * scale:
        raise DegenerateInput("matrix is not symmetric")
    m = 0.5 * (m + m.T)

    if method == "jacobi":
        w, vec = jacobi_eigh(m, vectors=vectors, max_sweeps=max_sweeps)
    elif method == "lapack":
        w, vec = np.linalg.eigh(m)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")

    order = np.argsort(w, kind="stable")[::-1]
    w = w[order]
    top = np.max(np.abs(w)) if w.size else 0.0
    w[(w < 0) & (np.abs(w) <= CLAMP_RELATIVE * top)] = 0.0
    if vectors:
        return w, vec[:, order]
    return w
