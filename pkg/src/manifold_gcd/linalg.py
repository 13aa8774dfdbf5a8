"""Dense float64 linear algebra used by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The
helpers here validate shapes and finiteness, and pin down conventions
(SVD signs, descending eigenvalue order, clamping of tiny eigenvalues)
that the spectral diagnostics rely on.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

EIG_CLAMP = 1e-12
SYMMETRY_TOL = 1e-12


class LinalgError(ValueError):
    """Raised on malformed input or a failed decomposition."""


class SvdResult(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array, rejecting anything else."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise LinalgError(f"{name} contains NaN or Inf")
    return m


def svd(a) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    The first entry of each left singular vector whose magnitude exceeds
    round-off is made non-negative; the matching row of ``vt`` is flipped
    with it so the product is unchanged.
    """
    m = as_matrix(a)
    if min(m.shape) < 1:
        raise LinalgError(f"svd needs a non-empty matrix, got shape {m.shape}")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise LinalgError(f"svd did not converge: {exc}") from exc
    tol = 1e-12 * max(1.0, float(np.abs(u).max()))
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > tol)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            vt[j, :] = -vt[j, :]
    return SvdResult(u, s, vt)


def singular_values(a) -> np.ndarray:
    m = as_matrix(a)
    try:
        return np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise LinalgError(f"svd did not converge: {exc}") from exc


def sym_eig(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending.

    Columns of the returned eigenvector matrix are orthonormal and
    ordered to match the eigenvalues.
    """
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise LinalgError(f"sym_eig needs a square matrix, got {m.shape}")
    asym = float(np.abs(m - m.T).max()) if m.size else 0.0
    if asym > SYMMETRY_TOL * max(1.0, float(np.abs(m).max())):
        raise LinalgError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def clamp_eigenvalues(w) -> np.ndarray:
    """Zero out eigenvalues whose magnitude is below round-off."""
    w = np.array(w, dtype=np.float64)
    w[np.abs(w) < EIG_CLAMP] = 0.0
    return w


def nuclear_norm(a) -> float:
    return float(np.sum(singular_values(a)))


def frobenius_norm(a) -> float:
    m = as_matrix(a)
    return float(np.sqrt(np.sum(m * m)))


# dense kernels

def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise LinalgError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def add(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape != b.shape:
        raise LinalgError(f"add shape mismatch {a.shape} + {b.shape}")
    return a + b


def scale(a, c: float) -> np.ndarray:
    return as_matrix(a) * float(c)


def row_slice(a, start: int, stop: int) -> np.ndarray:
    m = as_matrix(a)
    if not 0 <= start <= stop <= m.shape[0]:
        raise LinalgError(f"row slice [{start}:{stop}] out of range for {m.shape[0]} rows")
    return m[start:stop].copy()


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal n x n matrix."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def unit_rows(a) -> np.ndarray:
    m = as_matrix(a)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise LinalgError("cannot normalize a zero row")
    return m / norms
