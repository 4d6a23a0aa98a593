"""Continuous Lyapunov equation A S + S A* = 2 M.

This is the equation satisfied by the equilibrium covariance of a linear
fast process dX = -A X dt + sqrt(2) sigma dW (with M = sigma sigma*), and
it carries the exact trace identity tr(A S) = tr(sigma sigma*) used by the
entropy-production diagnostics.

Admissibility means the symmetric part of A is positive definite; that
makes -A Hurwitz, so the solution S = 2 int_0^inf exp(-sA) M exp(-sA*) ds
exists and is unique.  Dimensions up to KRON_MAX use a dense Kronecker
solve (exact up to roundoff, trivially batchable); larger systems fall
back to scipy's Bartels-Stewart implementation.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

__all__ = ["solve_lyapunov", "lyapunov_batch", "lyapunov_residual"]

KRON_MAX = 8
RESID_TOL = 1e-10


def _check_admissible(A):
    sym = 0.5 * (A + np.swapaxes(A, -1, -2))
    lam = np.linalg.eigvalsh(sym)[..., 0]
    if np.any(lam <= 0):
        raise ValueError(
            f"symmetric part of A must be positive definite "
            f"(min eigenvalue {np.min(lam):.3e})"
        )


def lyapunov_residual(A, M, S) -> float:
    """Frobenius norm of A S + S A^T - 2 M."""
    R = A @ S + S @ np.swapaxes(A, -1, -2) - 2.0 * M
    return float(np.max(np.sqrt(np.sum(R * R, axis=(-2, -1)))))


def _kron_solve(A, M):
    """Batched Kronecker solve; A, M of shape (..., d, d)."""
    d = A.shape[-1]
    eye = np.eye(d)
    # row-major vec: vec(A S) = (A kron I) vec(S), vec(S A^T) = (I kron A) vec(S)
    kron_ai = (A[..., :, None, :, None] * eye[None, :, None, :]).reshape(
        A.shape[:-2] + (d * d, d * d)
    )
    kron_ia = (eye[:, None, :, None] * A[..., None, :, None, :]).reshape(
        A.shape[:-2] + (d * d, d * d)
    )
    rhs = 2.0 * M.reshape(M.shape[:-2] + (d * d,))
    vec = np.linalg.solve(kron_ai + kron_ia, rhs[..., None])[..., 0]
    S = vec.reshape(M.shape)
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def solve_lyapunov(A, M) -> np.ndarray:
    """Solve A S + S A^T = 2 M for symmetric M; returns symmetric S.

    Raises ValueError if the symmetric part of A is not positive definite
    and RuntimeError if the residual exceeds 1e-10 (1 + ||M||_F).
    """
    A = np.asarray(A, dtype=float)
    M = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be a square matrix")
    if M.shape != A.shape:
        raise ValueError("M must have the same shape as A")
    if np.max(np.abs(M - M.T)) > 1e-12 * (1 + np.max(np.abs(M))):
        raise ValueError("M must be symmetric")
    _check_admissible(A)
    d = A.shape[0]
    if d <= KRON_MAX:
        S = _kron_solve(A, M)
    else:
        # -A is Hurwitz; scipy solves A X + X A^H = Q
        S = scipy.linalg.solve_continuous_lyapunov(-A, -2.0 * M)
        S = 0.5 * (S + S.T)
    resid = lyapunov_residual(A, M, S)
    if resid > RESID_TOL * (1.0 + np.linalg.norm(M)):
        raise RuntimeError(f"Lyapunov residual {resid:.3e} above tolerance")
    return S


def lyapunov_batch(A, M) -> np.ndarray:
    """Vectorized solve for stacked (..., d, d) inputs with d <= KRON_MAX."""
    A = np.asarray(A, dtype=float)
    M = np.asarray(M, dtype=float)
    d = A.shape[-1]
    if d > KRON_MAX:
        raise ValueError(f"batched solve limited to d <= {KRON_MAX}")
    _check_admissible(A)
    return _kron_solve(A, M)
