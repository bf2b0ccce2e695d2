from __future__ import annotations

import numpy as np

from .errors import InvalidSpecError


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise InvalidSpecError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def is_symmetric(m: np.ndarray, tol: float = 1e-10) -> bool:
    return bool(np.all(np.abs(m - np.swapaxes(m, -1, -2)) <= tol * (1.0 + np.abs(m).max(initial=0.0))))


def check_psd(m: np.ndarray, name: str, tol: float = 1e-10) -> None:
    if not is_symmetric(m):
        raise InvalidSpecError(f"{name} is not symmetric")
    eig = np.linalg.eigvalsh(symmetrize(m))
    scale = 1.0 + np.abs(eig).max(initial=0.0)
    if eig.min(initial=0.0) < -tol * scale:
        raise InvalidSpecError(f"{name} is not positive semidefinite (min eigenvalue {eig.min():.3e})")


def check_pd(m: np.ndarray, name: str) -> None:
    if not is_symmetric(m):
        raise InvalidSpecError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(symmetrize(m))
    except np.linalg.LinAlgError:
        raise InvalidSpecError(f"{name} is not positive definite") from None


def psd_factor(sigma: np.ndarray, pivot_tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == sigma`` for a PSD, possibly singular, matrix.

    Pivots below ``pivot_tol`` (relative to the largest diagonal entry) are
    treated as zero and their column dropped; a negative pivot or a nonzero
    remainder under a zero pivot means the matrix is not PSD.
    """
    a = symmetrize(np.array(sigma, dtype=float))
    n = a.shape[0]
    tol = pivot_tol * max(1.0, float(np.abs(np.diag(a)).max(initial=0.0)))
    L = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if d > tol:
            L[j, j] = np.sqrt(d)
            for i in range(j + 1, n):
                L[i, j] = (a[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
        elif d < -tol:
            raise InvalidSpecError("covariance is not positive semidefinite")
        else:
            for i in range(j + 1, n):
                if abs(a[i, j] - L[i, :j] @ L[j, :j]) > np.sqrt(tol):
                    raise InvalidSpecError("covariance is not positive semidefinite")
    return L
