"""Small dense linear-algebra kernel.

Matrices are plain ``numpy`` arrays. The routines here wrap LAPACK through
scipy and add the pivot and size checks the rest of the package relies on.
"""

import warnings

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    DimensionOverflow,
    NonConvergence,
    NotPositiveDefinite,
    SingularMatrix,
)

PIVOT_TOL = 1e-12
CHOL_PIVOT_TOL = 1e-14
SYM_TOL = 1e-12
KRON_CAP = 4096
EIG_MAXITER = 10_000


def as_matrix(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {M.shape}")
    return M


def _check_finite(X, what):
    if not np.all(np.isfinite(X)):
        raise SingularMatrix(f"{what} produced non-finite entries")
    return X


def solve_linear(M, b, pivot_tol=PIVOT_TOL):
    """Solve ``M x = b`` by LU with partial pivoting.

    ``b`` may be a vector or a matrix of right-hand sides.

    Raises:
        SingularMatrix: if a pivot of the factorization is smaller than
            ``pivot_tol`` in magnitude.
    """
    M = as_matrix(M)
    b = np.asarray(b, dtype=float)
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"solve_linear needs a square matrix, got {M.shape}")
    if b.shape[0] != M.shape[0]:
        raise DimensionMismatch(f"rhs has {b.shape[0]} rows, matrix has {M.shape[0]}")
    with warnings.catch_warnings():
        # an exactly singular matrix is reported below as SingularMatrix
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(M, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < pivot_tol:
        raise SingularMatrix("pivot below tolerance during LU factorization")
    x = scipy.linalg.lu_solve((lu, piv), b, check_finite=False)
    return _check_finite(x, "solve_linear")


def cholesky(M, pivot_tol=CHOL_PIVOT_TOL):
    """Lower-triangular ``L`` with ``L @ L.T == M``.

    PSD inputs (e.g. a singular disturbance covariance) must be jittered by
    the caller; ``1e-12 * I`` is the convention used in this package.
    """
    M = as_matrix(M)
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {M.shape}")
    if not np.allclose(M, M.T, rtol=0.0, atol=SYM_TOL):
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if np.min(np.diag(L)) ** 2 <= pivot_tol:
        raise NotPositiveDefinite("diagonal pivot below tolerance")
    return L


def spectral_radius(M, maxiter=EIG_MAXITER):
    """Largest eigenvalue modulus of a square matrix."""
    M = as_matrix(M)
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"spectral_radius needs a square matrix, got {M.shape}")
    if M.size == 0:
        return 0.0
    try:
        eigs = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise NonConvergence(f"eigenvalue iteration failed (cap {maxiter}): {exc}") from None
    return float(np.max(np.abs(eigs)))


def kron(Ma, Mb, cap=KRON_CAP):
    """Kronecker product, refusing results larger than ``cap`` in either dimension."""
    Ma = as_matrix(Ma)
    Mb = as_matrix(Mb)
    rows = Ma.shape[0] * Mb.shape[0]
    cols = Ma.shape[1] * Mb.shape[1]
    if rows > cap or cols > cap:
        raise DimensionOverflow(f"kron result {rows}x{cols} exceeds cap {cap}")
    return np.kron(Ma, Mb)


def is_symmetric(M, tol=SYM_TOL):
    M = as_matrix(M)
    return M.shape[0] == M.shape[1] and bool(np.all(np.abs(M - M.T) <= tol))


def min_eigenvalue(M):
    """Smallest eigenvalue of the symmetric part of ``M``."""
    M = as_matrix(M)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def psd_sqrt(M, jitter=0.0):
    """Symmetric square root of a PSD matrix via its eigendecomposition."""
    M = as_matrix(M)
    w, V = np.linalg.eigh(0.5 * (M + M.T) + jitter * np.eye(M.shape[0]))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def numerical_rank(M, rel_tol=1e-9):
    """Rank with singular values below ``rel_tol * sigma_max`` treated as zero."""
    M = as_matrix(M)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))
