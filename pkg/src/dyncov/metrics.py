"""Rotation-aligned parameter distance and covariance-level error metrics."""

from __future__ import annotations

import numpy as np

from .estimation import FactorEstimate, covariances_from
from .exceptions import DataError

__all__ = [
    "optimal_rotation",
    "dist_squared",
    "covariances_from",
    "matrix_log",
    "log_euclidean_errors",
    "avg_log_euclidean",
]


def optimal_rotation(V, Vstar) -> np.ndarray:
    """Orthogonal ``R`` minimizing ``||V - Vstar R||_F`` (reflections allowed).

    With ``Vstar^T V = U D W^T`` the minimizer is ``R = U W^T``.
    """
    V = np.asarray(V, dtype=float)
    Vstar = np.asarray(Vstar, dtype=float)
    if V.shape != Vstar.shape:
        raise DataError(f"shape mismatch {V.shape} vs {Vstar.shape}")
    if np.array_equal(V, Vstar):
        # I attains the minimum exactly; the SVD route would leave roundoff
        return np.eye(V.shape[1])
    U, _, Wt = np.linalg.svd(Vstar.T @ V)
    return U @ Wt


def dist_squared(Z: FactorEstimate, Zstar: FactorEstimate, return_rotation: bool = False):
    """``sum_j ||V - V* R||_F^2 + ||diag(a_j) - R^T diag(a*_j) R||_F^2`` with R from (V, V*)."""
    if Z.V.shape != Zstar.V.shape or Z.A.shape != Zstar.A.shape:
        raise DataError("estimate and reference must share P, K and J")
    R = optimal_rotation(Z.V, Zstar.V)
    J = Z.J
    v_term = float(np.sum((Z.V - Zstar.V @ R) ** 2))
    # R^T diag(a*_j) R for all j at once
    rot = np.einsum("ki,kj,kl->jil", R, Zstar.A, R)
    diff = rot.copy()
    idx = np.arange(Z.K)
    diff[:, idx, idx] -= Z.A.T
    d = J * v_term + float(np.sum(diff**2))
    if return_rotation:
        return d, R
    return d


def matrix_log(M, cutoff: float = 1e-5) -> np.ndarray:
    """Symmetric matrix logarithm on the eigenspace with ``|lambda| >= cutoff``.

    Accepts a single matrix or a stack. Negative retained eigenvalues (which
    only arise from roundoff-level asymmetry or non-PSD input) use ``log|lambda|``.
    """
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    w, U = np.linalg.eigh(M)
    keep = np.abs(w) >= cutoff
    logw = np.where(keep, np.log(np.where(keep, np.abs(w), 1.0)), 0.0)
    return (U * logw[..., None, :]) @ np.swapaxes(U, -1, -2)


def log_euclidean_errors(Sigmas, Sigmas_star, cutoff: float = 1e-5) -> np.ndarray:
    """Per-time ``||log Sigma_j - log Sigma*_j||_F``."""
    L1 = matrix_log(Sigmas, cutoff)
    L2 = matrix_log(Sigmas_star, cutoff)
    return np.linalg.norm(L1 - L2, axis=(-2, -1))


def avg_log_euclidean(Sigmas, Sigmas_star, cutoff: float = 1e-5) -> float:
    return float(np.mean(log_euclidean_errors(Sigmas, Sigmas_star, cutoff)))
