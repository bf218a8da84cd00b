"""Dense linear algebra for small symmetric positive (semi-)definite matrices.

Everything here operates on plain numpy arrays: vectors of shape ``(d,)`` and
symmetric matrices of shape ``(d, d)``.  Dimensions are small (single digits
in the shipped experiments), so all factorizations are recomputed on demand
rather than maintained incrementally.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

# Absolute eigenvalue tolerance below which a nominally-PSD matrix is treated
# as indefinite.
PSD_TOL = 1e-9

# Positive-definiteness floor for solves.
PD_MIN_EIG = 1e-12


class IndefiniteMatrixError(ValueError):
    """A quadratic form that must be nonnegative came out negative."""


class SpdSolveError(np.linalg.LinAlgError):
    """A factorization or solve failed because the matrix is not SPD.

    ``min_eigenvalue`` carries the smallest-eigenvalue estimate of the
    offending matrix so callers can report how far from PD it was.
    """

    def __init__(self, message: str, min_eigenvalue: float | None = None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


def hnorm(v: np.ndarray, H: np.ndarray) -> float:
    """Return ``sqrt(v' H v)`` for PSD ``H``.

    Tiny negative quadratic forms (roundoff) are clamped to zero; anything
    below ``-PSD_TOL`` raises :class:`IndefiniteMatrixError`.
    """
    q = float(v @ H @ v)
    if q < -PSD_TOL:
        raise IndefiniteMatrixError(
            f"quadratic form is {q:.3e} < -{PSD_TOL:g}; metric is not PSD"
        )
    return np.sqrt(q) if q > 0.0 else 0.0


def rank_one_update(V: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return ``V + x x'`` (symmetry is preserved exactly in floating point)."""
    return V + np.outer(x, x)


def chol_spd(V: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of SPD ``V``; raises :class:`SpdSolveError`."""
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise SpdSolveError(
            "matrix is not positive definite",
            min_eigenvalue=min_eig(V),
        ) from None


def cho_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``(L L') X = B`` given a lower Cholesky factor."""
    X, info = scipy.linalg.lapack.dpotrs(L, B, lower=1)
    if info != 0:
        raise SpdSolveError(f"dpotrs failed with info={info}")
    return X


def solve_spd(V: np.ndarray, b: np.ndarray, chol: np.ndarray | None = None) -> np.ndarray:
    """Solve ``V theta = b`` for SPD ``V`` via Cholesky.

    The returned solution satisfies ``||V theta - b|| <= 1e-8 (1 + ||b||)``;
    one step of iterative refinement is applied if the first solve misses
    that bound.  A precomputed lower Cholesky factor may be passed to avoid
    refactorizing.
    """
    L = chol_spd(V) if chol is None else chol
    theta = cho_solve(L, b)
    resid = b - V @ theta
    tol = 1e-8 * (1.0 + float(np.linalg.norm(b)))
    if float(np.linalg.norm(resid)) > tol:
        theta = theta + cho_solve(L, resid)
        resid = b - V @ theta
        if float(np.linalg.norm(resid)) > tol:
            raise SpdSolveError(
                "solve did not reach the residual tolerance",
                min_eigenvalue=min_eig(V),
            )
    return theta


def logdet(V: np.ndarray) -> float:
    """Return ``ln det V`` for positive definite ``V`` (Cholesky based)."""
    diag = np.diagonal(V)
    if np.count_nonzero(V - np.diag(diag)) == 0:
        if np.any(diag <= 0.0):
            raise SpdSolveError(
                "diagonal matrix has a nonpositive entry",
                min_eigenvalue=float(diag.min()),
            )
        return float(np.sum(np.log(diag)))
    L = chol_spd(V)
    return float(2.0 * np.sum(np.log(np.diagonal(L))))


def min_eig(V: np.ndarray) -> float:
    """Smallest eigenvalue of symmetric ``V``."""
    return float(np.linalg.eigvalsh(V)[0])
