"""Dense f64 kernels: truncated SVD, polar orthonormalization, jittered SPD solves."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

JITTER_GROWTH = 10.0
MAX_ESCALATIONS = 6


class SolveError(np.linalg.LinAlgError):
    """Cholesky failed even after the jitter escalation schedule."""


@dataclass(frozen=True)
class ThinSVD:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


def _as_finite_matrix(M, name="M") -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite values")
    return M


def _fix_signs(U: np.ndarray, V: np.ndarray) -> None:
    # Flip columns whose largest-magnitude U entry is negative.
    if U.shape[1] == 0:
        return
    idx = np.argmax(np.abs(U), axis=0)
    flip = U[idx, np.arange(U.shape[1])] < 0
    U[:, flip] *= -1.0
    V[:, flip] *= -1.0


def thin_svd(M, r: int) -> ThinSVD:
    """Top-``r`` singular triples of ``M`` with a deterministic sign convention."""
    M = _as_finite_matrix(M)
    if not (1 <= r <= min(M.shape)):
        raise ValueError(f"rank {r} out of range for a {M.shape[0]}x{M.shape[1]} matrix")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    U = np.ascontiguousarray(U[:, :r])
    V = np.ascontiguousarray(Vt[:r].T)
    _fix_signs(U, V)
    return ThinSVD(U, s[:r].copy(), V)


def procrustes_orthonormalize(A, tol: float = 1e-12) -> np.ndarray:
    """Nearest column-orthonormal matrix to ``A`` (its orthonormal polar factor).

    With ``A = P diag(s) R^T`` this returns ``P R^T``, which maximizes
    ``trace(Q^T A)`` over column-orthonormal ``Q``. Directions whose singular
    value is below ``tol`` are still filled in from ``P``, whose columns are
    orthonormal regardless of ``s``, so ``Q^T Q = I`` holds for rank-deficient
    input as well.
    """
    A = _as_finite_matrix(A, "A")
    d, q = A.shape
    if q > d:
        raise ValueError(f"cannot orthonormalize {q} columns in dimension {d}")
    if q == 0:
        return np.zeros((d, 0))
    P, s, Rt = np.linalg.svd(A, full_matrices=False)
    if s[-1] < tol * max(1.0, s[0]):
        logger.debug("procrustes input is rank deficient (min singular value %.3g)", s[-1])
    return P @ Rt


def spd_solve(A, B, eps: float = 0.0) -> tuple[np.ndarray, float]:
    """Solve ``(A + eps_used I) X = B`` by Cholesky, escalating the jitter on failure.

    Returns ``(X, eps_used)``. The jitter starts at ``eps`` and grows tenfold
    up to six times; when ``eps`` is zero the first escalation starts from
    ``1e-12`` times the mean diagonal magnitude.
    """
    A = _as_finite_matrix(A, "A")
    B = np.asarray(B, dtype=np.float64)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got {A.shape}")
    if B.shape[0] != A.shape[0]:
        raise ValueError(f"B has {B.shape[0]} rows, A is {A.shape[0]}x{A.shape[0]}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    scale = max(np.max(np.abs(A), initial=0.0), np.finfo(float).tiny)
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-10 * scale:
        raise ValueError("A is not symmetric")
    p = A.shape[0]
    if p == 0:
        return np.zeros_like(B), eps

    diag = np.diag(A)
    is_diagonal = np.count_nonzero(A - np.diag(diag)) == 0
    eps_used = float(eps)
    base = 1e-12 * max(float(np.mean(np.abs(diag))), 1.0)
    for attempt in range(MAX_ESCALATIONS + 1):
        if is_diagonal:
            d = diag + eps_used
            if np.all(d > 0):
                X = B / (d if B.ndim == 1 else d[:, None])
                return X, eps_used
        else:
            try:
                factor = scipy.linalg.cho_factor(A + eps_used * np.eye(p), lower=True, check_finite=False)
                return scipy.linalg.cho_solve(factor, B, check_finite=False), eps_used
            except np.linalg.LinAlgError:
                pass
        if attempt == MAX_ESCALATIONS:
            break
        eps_used = eps_used * JITTER_GROWTH if eps_used > 0 else base
        logger.info("cholesky failed, escalating jitter to %.3g", eps_used)
    raise SolveError(f"matrix not positive definite after jitter escalation to {eps_used:.3g}")
